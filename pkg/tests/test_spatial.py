import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from fbbench.spatial import (
    AreaGraph,
    Bym2Params,
    Bym2Structure,
    beta_logpdf,
    bym2_logprior,
    bym2_scaling_factor,
    icar_precision,
    pc_precision_logpdf,
    project_sum_zero,
    sa_province_graph,
)


def path2():
    return AreaGraph.from_edges(2, [(0, 1)])


def triangle():
    return AreaGraph.from_edges(3, [(0, 1), (1, 2), (0, 2)])


def pinv_kappa(graph):
    q = icar_precision(graph).toarray()
    return float(np.exp(np.mean(np.log(np.diag(np.linalg.pinv(q))))))


def test_graph_rejects_asymmetry_loops_islands():
    with pytest.raises(ValueError):
        AreaGraph(2, ((1,), ()))
    with pytest.raises(ValueError):
        AreaGraph(2, ((0, 1), (0,)))
    with pytest.raises(ValueError, match="components"):
        AreaGraph.from_edges(4, [(0, 1), (2, 3)])


def test_graph_text_round_trip(tmp_path):
    g = sa_province_graph()
    assert g.n_areas == 9
    p = tmp_path / "g.graph"
    p.write_text(g.to_text())
    assert AreaGraph.from_file(p) == g
    assert AreaGraph.from_text("2,3\n1\n1\n").neighbors == ((1, 2), (0,), (0,))


def test_icar_small_graphs():
    assert np.array_equal(icar_precision(path2()).toarray(), [[1, -1], [-1, 1]])
    q = icar_precision(triangle()).toarray()
    assert np.array_equal(np.diag(q), [2, 2, 2])
    assert np.all(q[~np.eye(3, dtype=bool)] == -1)


def test_icar_simulation_graph_rank_and_rows():
    q = icar_precision(sa_province_graph())
    assert np.all(q @ np.ones(9) == 0.0)
    ev = np.linalg.eigvalsh(q.toarray())
    assert np.sum(ev > 1e-9) == 8


def test_scaling_factor_oracles():
    assert bym2_scaling_factor(path2()) == pytest.approx(0.25, abs=1e-14)
    assert bym2_scaling_factor(path2()) == pytest.approx(pinv_kappa(path2()), abs=1e-14)
    assert bym2_scaling_factor(triangle()) == pytest.approx(2 / 9, abs=1e-14)
    g = sa_province_graph()
    k = bym2_scaling_factor(g)
    assert k == pytest.approx(pinv_kappa(g), rel=1e-10)
    scaled = np.linalg.pinv(k * icar_precision(g).toarray())
    assert abs(np.exp(np.mean(np.log(np.diag(scaled)))) - 1.0) < 1e-8
    assert bym2_scaling_factor(AreaGraph(1, ((),))) == 1.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=12))
def test_projection_idempotent_and_in_null_complement(u):
    u = np.array(u)
    p = project_sum_zero(u)
    assert np.allclose(project_sum_zero(p), p, atol=1e-14, rtol=0)
    assert abs(p.sum()) < 1e-12
    # removing the constant direction leaves the ICAR quadratic form unchanged
    g = AreaGraph.from_edges(u.size, [(i, i + 1) for i in range(u.size - 1)])
    q = icar_precision(g).toarray()
    assert u @ q @ u == pytest.approx(p @ q @ p, rel=1e-9, abs=1e-9)


def test_icar_logpdf_matches_degenerate_gaussian():
    g = sa_province_graph()
    s = Bym2Structure(g)
    cov = np.linalg.pinv(s.q_scaled)
    mvn = stats.multivariate_normal(np.zeros(9), cov, allow_singular=True)
    rng = np.random.default_rng(3)
    for _ in range(5):
        u = project_sum_zero(rng.normal(size=9))
        assert s.icar_logpdf(u) == pytest.approx(mvn.logpdf(u), abs=1e-9)


def test_pc_prior_normalized_and_tail():
    f = lambda t: math.exp(pc_precision_logpdf(t, 1.0, 0.01))
    # substitute sigma = tau^-1/2 pieces so the quadrature sees smooth tails
    total = integrate.quad(f, 0, 1)[0] + integrate.quad(f, 1, np.inf)[0]
    assert abs(total - 1.0) < 1e-6
    # P(sigma > 1) = P(tau < 1) = alpha
    assert integrate.quad(f, 0, 1)[0] == pytest.approx(0.01, abs=1e-8)
    assert pc_precision_logpdf(0.0) == -math.inf


def test_beta_half_half_at_midpoint():
    assert beta_logpdf(0.5, 0.5, 0.5) == pytest.approx(math.log(2 / math.pi), abs=1e-14)
    assert beta_logpdf(1.5, 0.5, 0.5) == -math.inf


def test_bym2_logprior_components():
    g = sa_province_graph()
    s = Bym2Structure.for_graph(g)
    rng = np.random.default_rng(5)
    u = project_sum_zero(rng.normal(size=9))
    v = rng.normal(size=9)
    p = Bym2Params(2.0, 0.3, u, v)
    expect = (
        s.icar_logpdf(u)
        + stats.norm.logpdf(v).sum()
        + pc_precision_logpdf(2.0)
        + stats.beta(0.5, 0.5).logpdf(0.3)
    )
    assert bym2_logprior(p, g) == pytest.approx(expect, abs=1e-10)
    assert bym2_logprior(Bym2Params(-1.0, 0.3, u, v), g) == -math.inf
    assert bym2_logprior(Bym2Params(1.0, 1.3, u, v), g) == -math.inf


def test_bym2_params_sum_to_zero_invariant():
    with pytest.raises(ValueError):
        Bym2Params(1.0, 0.5, np.array([1.0, 0.0]), np.zeros(2))


@pytest.mark.parametrize("phi", [0.0, 1.0])
def test_bym2_marginal_variances_by_monte_carlo(phi):
    g = sa_province_graph()
    s = Bym2Structure(g)
    tau = 4.0
    rng = np.random.default_rng(17)
    n_mc = 100_000
    b = s.sample_bym2(tau, phi, rng, n_mc)
    target = np.full(9, 1 / tau) if phi == 0.0 else np.diag(s.covariance) / tau
    var = b.var(axis=0)
    se = target * math.sqrt(2.0 / n_mc)
    assert np.all(np.abs(var - target) < 3 * se + 1e-12)
    if phi == 1.0:
        assert np.allclose(b.sum(axis=1), 0.0, atol=1e-10)
