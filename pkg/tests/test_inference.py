import math

import numpy as np
import pytest
from scipy import integrate, stats

from fbbench import Benchmark, ClusterDataset
from fbbench.diagnostics import bulk_ess
from fbbench.inference import InitializationError, MCMCRun, SamplerConfig, fit_joint_oracle, fit_unbenchmarked
from fbbench.models import Priors
from fbbench.spatial import AreaGraph

from conftest import simulate

ONE = AreaGraph.from_edges(1, [])


def one_area_data():
    return ClusterDataset(np.zeros(3, dtype=int), np.array([10, 10, 10]), np.array([3, 4, 2]), 1)


def test_config_validation():
    for kw in ({"n_chains": 0}, {"n_warmup": -1}, {"n_draws": 0}, {"thin": 0},
               {"target_accept": 1.0}, {"scan": "sideways"}, {"frozen": {"gamma"}}):
        with pytest.raises(ValueError):
            SamplerConfig(**kw)
    with pytest.raises(ValueError):
        MCMCRun("area", None, ONE)


def test_one_area_binomial_matches_quadrature_oracle():
    # eta = beta0 with a flat prior: posterior density of theta is
    # proportional to theta^(y-1) (1-theta)^(n-y-1)
    data = one_area_data()
    y, n = 9, 30
    pri = Priors(intercept_prior="flat", cluster_effect=False)
    cfg = SamplerConfig(n_chains=4, n_warmup=1000, n_draws=5000, seed=1, thin=4,
                        frozen={"v", "u", "tau_b", "phi"})
    draws = fit_unbenchmarked("unit", data, ONE, pri, cfg)
    th = draws.theta[:, 0]
    assert th.size == 20000
    dens = lambda t: t ** (y - 1) * (1 - t) ** (n - y - 1)
    edges = np.linspace(0, 1, 26)
    mass = np.array([integrate.quad(dens, a, b)[0] for a, b in zip(edges[:-1], edges[1:])])
    mass /= mass.sum()
    assert np.allclose(mass, np.diff(stats.beta(y, n - y).cdf(edges)), atol=1e-12)
    hist = np.histogram(th, edges)[0] / th.size
    assert 0.5 * np.abs(hist - mass).sum() < 0.02


def test_prior_only_run_recovers_intercept_prior(graph):
    pri = Priors(intercept_prior="normal", intercept_variance=1000.0)
    frozen = {"v", "u", "z", "tau_b", "phi", "sigma2_e"}
    cfg = SamplerConfig(n_chains=4, n_warmup=500, n_draws=2500, seed=2, frozen=frozen)
    d = fit_unbenchmarked("unit", None, graph, pri, cfg)
    b = d.beta0
    ess = bulk_ess(d.chain_array(b))
    sd = math.sqrt(1000.0)
    assert abs(b.mean()) < 3 * sd / math.sqrt(ess)
    assert abs(b.var() - 1000.0) < 3 * math.sqrt(2.0) * 1000.0 / math.sqrt(ess)


def test_initialization_error(graph, small_data, monkeypatch):
    from fbbench import inference

    monkeypatch.setattr(inference._Target, "rec_ll", lambda self, eta, sl=slice(None): np.full(np.size(eta), -np.inf))
    with pytest.raises(InitializationError):
        MCMCRun("unit", small_data, graph, cfg=SamplerConfig(max_init_tries=3))


def test_draw_layout_and_determinism(graph, small_data):
    cfg = SamplerConfig(n_chains=3, n_warmup=100, n_draws=40, seed=5)
    a = fit_unbenchmarked("unit", small_data, graph, cfg=cfg)
    b = fit_unbenchmarked("unit", small_data, graph, cfg=cfg)
    assert a.n_draws == 120 and a.n_chains == 3
    assert np.array_equal(a.chain_ids, np.repeat(np.arange(3), 40))
    for name in ("theta", "eta", "beta0"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    for k in a.hypers:
        assert np.array_equal(a.hypers[k], b.hypers[k])
    c = fit_unbenchmarked("unit", small_data, graph, cfg=SamplerConfig(n_chains=3, n_warmup=100, n_draws=40, seed=6))
    assert not np.array_equal(a.theta, c.theta)
    assert np.allclose(a.eta.mean(axis=1) * 0 + a.beta0, a.beta0)


def test_extend_matches_single_run(graph, small_data):
    cfg = SamplerConfig(n_chains=2, n_warmup=50, n_draws=60, seed=7)
    whole = fit_unbenchmarked("fh", small_data, graph, cfg=cfg)
    run = MCMCRun("fh", small_data, graph, cfg=cfg)
    run.extend(25)
    run.extend(35)
    assert np.array_equal(run.draws.theta, whole.theta)
    assert np.array_equal(run.draws.draw_index, whole.draw_index)


def test_adaptation_frozen_after_warmup(graph, small_data):
    run = MCMCRun("unit", small_data, graph, cfg=SamplerConfig(n_chains=2, n_warmup=300, seed=8))
    run.warmup()
    before = [ch.step_sizes() for ch in run.chains]
    run.extend(200)
    for ch, old in zip(run.chains, before):
        new = ch.step_sizes()
        assert old.keys() == new.keys()
        for k in old:
            assert np.array_equal(np.asarray(old[k]), np.asarray(new[k])), k


def test_acceptance_rates_in_tuning_band(graph, small_data):
    run = MCMCRun("unit", small_data, graph, Priors(cluster_prior="loggamma"),
                  SamplerConfig(n_warmup=1000, n_draws=1000, seed=9))
    run.run()
    for rates in run.acceptance_rates():
        for move, r in rates.items():
            assert 0.1 <= r <= 0.5, (move, r)


def test_random_scan_reversibility():
    # two free coordinates (beta0, v) of the one-area model; coarse-grained
    # stationary fluxes between cells must be symmetric
    pri = Priors(intercept_prior="normal", intercept_variance=4.0, cluster_effect=False)
    cfg = SamplerConfig(n_chains=4, n_warmup=2000, n_draws=25000, seed=10, scan="random",
                        frozen={"u", "tau_b", "phi"})
    d = fit_unbenchmarked("unit", one_area_data(), ONE, pri, cfg)
    b0, eta = d.beta0, d.eta[:, 0]
    qb = np.quantile(b0, [1 / 3, 2 / 3])
    qe = np.quantile(eta, [1 / 3, 2 / 3])
    cell = np.searchsorted(qb, b0) * 3 + np.searchsorted(qe, eta)
    counts = np.zeros((9, 9))
    for c in range(d.n_chains):
        s = cell[d.chain_ids == c]
        np.add.at(counts, (s[:-1], s[1:]), 1)
    iu = np.triu_indices(9, 1)
    num = (counts[iu] - counts.T[iu]) ** 2
    den = counts[iu] + counts.T[iu]
    keep = den > 0
    chi2 = float(np.sum(num[keep] / den[keep]))
    assert keep.sum() >= 10
    assert stats.chi2.sf(chi2, keep.sum()) > 1e-3


def test_fh_model_runs_and_tracks_direct_estimates(graph):
    from fbbench import direct_estimates

    data = simulate(100, seed=12)
    de = direct_estimates(data)
    d = fit_unbenchmarked("fh", de, graph, cfg=SamplerConfig(n_warmup=500, n_draws=500, seed=11))
    assert d.link == "fh" and set(d.hypers) == {"tau_b", "phi"}
    assert np.max(np.abs(np.median(d.theta, axis=0) - de.theta_hat)) < 0.02


@pytest.mark.slow
def test_flat_benchmark_joint_matches_unbenchmarked(graph, small_data):
    cfg = SamplerConfig(n_chains=4, n_warmup=2000, n_draws=1500, thin=20, seed=13)
    base = fit_unbenchmarked("unit", small_data, graph, cfg=cfg)
    flat = Benchmark.equal_weights(0.29, 1e6, 9)
    joint = fit_joint_oracle("unit", small_data, graph, Priors(), flat,
                             SamplerConfig(n_chains=4, n_warmup=2000, n_draws=1500, thin=20, seed=14))
    for i in range(9):
        assert stats.ks_2samp(base.theta[:, i], joint.theta[:, i]).statistic < 0.05
