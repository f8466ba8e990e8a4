import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize, special

from fbbench import Benchmark, DrawMatrix
from fbbench.benchmarkers import (
    BayesEstimateInputs,
    BenchmarkInconsistent,
    MHBenchmarker,
    RakingError,
    RejectionBenchmarker,
    acceptance_probability,
    bayes_benchmark,
    bayes_estimate,
    mh_acceptance,
    mh_benchmark,
    out_of_range_rows,
    project_draws,
    rake_benchmark,
    rejection_benchmark,
)
from fbbench.models import InterceptShiftPrior


def make_draws(theta, n_chains=1, beta0=None):
    theta = np.asarray(theta, dtype=float)
    k = theta.shape[0]
    eta = special.logit(theta)
    return DrawMatrix(
        theta=theta,
        eta=eta,
        beta0=eta.mean(axis=1) if beta0 is None else np.asarray(beta0, float),
        hypers={"tau_b": np.ones(k), "phi": np.full(k, 0.5)},
        chain_ids=np.arange(k) * n_chains // k,
        link="fh",
    )


def random_draws(rng, k=4000, n=9, n_chains=4, centre=0.32, spread=0.1):
    return make_draws(special.expit(special.logit(centre) + spread * rng.standard_normal((k, n))), n_chains)


def kkt_oracle(e, w, phi, y2):
    # minimise sum phi (t - e)^2 subject to w.t = y2 through the KKT system
    n = e.size
    a = np.zeros((n + 1, n + 1))
    a[:n, :n] = np.diag(2 * phi)
    a[:n, n] = w
    a[n, :n] = w
    rhs = np.concatenate([2 * phi * e, [y2]])
    return np.linalg.solve(a, rhs)[:n]


# -- rejection ------------------------------------------------------------------


def test_acceptance_probability_values():
    bench = Benchmark.equal_weights(0.3, 0.0004, 4)
    assert acceptance_probability(np.full(4, 0.3), bench)[0] == 1.0
    p = acceptance_probability(np.full((1, 4), 0.32), bench)[0]
    assert p == pytest.approx(math.exp(-0.5), rel=1e-15, abs=0)


def test_rejection_rate_matches_plugin_mean():
    rng = np.random.default_rng(1)
    d = random_draws(rng, k=20000)
    bench = Benchmark.equal_weights(0.3, 0.0001, 9)
    res = rejection_benchmark(d, bench, rng_seed=3)
    p = acceptance_probability(d.theta, bench).mean()
    assert abs(res.acceptance_rate - p) < 2 * math.sqrt(p * (1 - p) / d.n_draws)
    assert res.info["n_considered"] == d.n_draws
    assert res.draws.n_draws == res.info["n_accepted"]


def test_rejection_is_monotone_in_variance_on_shared_uniforms():
    rng = np.random.default_rng(2)
    d = random_draws(rng)
    rates = []
    accepted = []
    for s2 in (0.01, 0.001, 0.0001):
        r = RejectionBenchmarker(Benchmark.equal_weights(0.29, s2, 9), rng_seed=4)
        r.feed(d)
        rates.append(r.acceptance_rate)
        accepted.append(set(map(tuple, r.accepted_draws().theta.round(12))))
    assert all(a > b for a, b in zip(rates, rates[1:]))
    assert all(small <= big for big, small in zip(accepted, accepted[1:]))


def test_rejection_stream_until_target():
    rng = np.random.default_rng(3)
    bench = Benchmark.equal_weights(0.31, 0.001, 9)
    r = RejectionBenchmarker(bench, rng_seed=5, target_accepted=300)
    offset = 0
    while not r.done:
        part = random_draws(rng, k=400)
        part.draw_index = part.draw_index + offset
        offset += 100
        r.feed(part)
    out = r.accepted_draws()
    assert out.n_draws == 300 == r.n_accepted
    assert np.all(np.diff(out.chain_ids) >= 0)
    assert r.feed(random_draws(rng, k=400)) == 0
    res = r.result()
    assert res.acceptance_rate == r.n_accepted / r.n_considered


def test_rejection_inconsistent_benchmark():
    rng = np.random.default_rng(4)
    d = random_draws(rng, k=400, spread=0.01)
    with pytest.raises(BenchmarkInconsistent) as err:
        rejection_benchmark(d, Benchmark.equal_weights(0.9, 1e-6, 9))
    assert err.value.max_probability < 1e-100


def test_rejection_warns_when_target_missed():
    rng = np.random.default_rng(5)
    res = rejection_benchmark(random_draws(rng, k=400), Benchmark.equal_weights(0.32, 0.01, 9), target_accepted=10**6)
    assert res.warnings


# -- independence Metropolis-Hastings --------------------------------------------


def test_mh_acceptance_cases():
    assert mh_acceptance(-3.0, -1.0, -3.0, -1.0) == 1.0
    # equal shift-prior values cancel
    assert mh_acceptance(-2.0, 0.7, -1.0, 0.7) == pytest.approx(math.exp(-1.0))
    assert mh_acceptance(-1.0, 0.7, -2.0, 0.7) == 1.0
    with pytest.raises(FloatingPointError):
        mh_acceptance(float("nan"), 0.0, 0.0, 0.0)


def test_mh_with_replacement_targets_reweighted_pool():
    # uniform proposals over a finite pool: stationary mass of row j is
    # proportional to pi(y2 | row j) / pi+(beta0_j)
    theta = np.array([[0.28, 0.30], [0.30, 0.31], [0.33, 0.33], [0.35, 0.36], [0.40, 0.38]])
    beta0 = np.array([-1.0, -0.9, -0.8, -0.7, -0.6])
    pool = make_draws(theta, beta0=beta0)
    bench = Benchmark.equal_weights(0.31, 0.001, 2)
    shift = InterceptShiftPrior(-0.85, 0.05)
    mh = MHBenchmarker(bench, shift, n_chains=2, n_warmup=100, rng_seed=6, replace=True)
    mh.add_rows(pool)
    mh.run(30000)
    visits = np.bincount(np.concatenate(mh.visited_rows()), minlength=5)
    from fbbench.core import benchmark_loglik

    logw = np.array([benchmark_loglik(t, bench) - shift.logpdf(b) for t, b in zip(theta, beta0)])
    p = np.exp(logw - logw.max())
    p /= p.sum()
    freq = visits / visits.sum()
    assert np.max(np.abs(freq - p)) < 0.02


def test_mh_without_replacement_uses_each_row_once():
    rng = np.random.default_rng(7)
    pool = random_draws(rng, k=2000)
    bench = Benchmark.equal_weights(0.31, 0.01, 9)
    shift = InterceptShiftPrior.for_benchmark(bench, 0.1)
    mh = MHBenchmarker(bench, shift, n_chains=4, n_warmup=10, rng_seed=8)
    mh.add_rows(pool)
    assert mh.rows_needed(100) == 4 * 11 + 400
    mh.run(100)
    assert mh.n_available == 2000 - 444
    with pytest.raises(RuntimeError):
        mh.run(1000)
    res = mh.result()
    assert res.draws.n_draws == 400 and res.draws.chains.size == 4
    assert 0.0 < res.acceptance_rate <= 1.0
    # every output row is some pool row
    pool_rows = {tuple(r) for r in pool.theta}
    assert all(tuple(r) in pool_rows for r in res.draws.theta)


def test_mh_benchmark_default_length_and_floor_warning():
    rng = np.random.default_rng(9)
    pool = random_draws(rng, k=800, spread=0.3)
    bench = Benchmark.equal_weights(0.31, 1e-9, 9)
    shift = InterceptShiftPrior.for_benchmark(bench, 0.1)
    res = mh_benchmark(pool, bench, shift, n_chains=4, n_warmup=20, rng_seed=1, floor=0.05)
    assert res.draws.n_draws == 4 * (200 - 21)
    assert res.acceptance_rate < 0.05 and res.warnings
    ok = mh_benchmark(pool, Benchmark.equal_weights(0.31, 1.0, 9), shift, n_warmup=20)
    assert ok.acceptance_rate > 0.05 and not ok.warnings


# -- raking ---------------------------------------------------------------------


def test_rake_identity_and_scaling():
    rng = np.random.default_rng(10)
    d = random_draws(rng, k=1001)
    w = rng.dirichlet(np.ones(9))
    bench = Benchmark(0.25, 0.01, w)
    res = rake_benchmark(d, bench)
    raked = res.draws.theta
    assert abs(np.median(raked, axis=0) @ w - 0.25) < 1e-12
    r = res.info["ratio"]
    assert np.allclose(np.median(raked, axis=0), np.median(d.theta, axis=0) / r, rtol=1e-14)
    width = lambda t: np.quantile(t, 0.975, axis=0) - np.quantile(t, 0.025, axis=0)
    assert np.allclose(width(raked), width(d.theta) / r, rtol=1e-12)
    assert np.array_equal(np.argsort(np.median(raked, axis=0)), np.argsort(np.median(d.theta, axis=0)))
    assert res.draws.link == "derived" and res.acceptance_rate is None


def test_rake_trivial_cases():
    theta = np.full((5, 3), 0.4)
    res = rake_benchmark(make_draws(theta), Benchmark.equal_weights(0.2, 0.01, 3))
    assert res.info["ratio"] == 2.0
    assert np.array_equal(res.draws.theta, np.full((5, 3), 0.2))
    rng = np.random.default_rng(11)
    d = random_draws(rng, k=11, n=3)
    y2 = float(np.median(d.theta, axis=0).mean())
    same = rake_benchmark(d, Benchmark.equal_weights(y2, 0.01, 3))
    assert np.allclose(same.draws.theta, d.theta, rtol=1e-15)


def test_rake_error_lists_areas():
    theta = np.array([[0.5, 0.9], [0.6, 0.95], [0.4, 0.92]])
    with pytest.raises(RakingError) as err:
        rake_benchmark(make_draws(theta), Benchmark.equal_weights(0.9, 0.01, 2))
    assert list(err.value.areas) == [1]


# -- benchmarked Bayes estimate ---------------------------------------------------


def test_worked_example():
    bench = Benchmark(0.4, 0.01, np.array([0.5, 0.5]))
    inp = BayesEstimateInputs(np.array([0.2, 0.4]), bench)
    assert inp.s == 0.5
    est = bayes_estimate(inp)
    assert np.array_equal(est, np.array([0.3, 0.5]))
    assert np.allclose(kkt_oracle(inp.theta_B, bench.weights, inp.loss_weights, 0.4), est, atol=1e-15)
    qp = optimize.minimize(
        lambda t: np.sum((t - inp.theta_B) ** 2), x0=inp.theta_B, method="SLSQP",
        constraints=[{"type": "eq", "fun": lambda t: t @ bench.weights - 0.4}], tol=1e-14,
    )
    assert np.allclose(qp.x, est, atol=1e-9)
    near = bayes_estimate(BayesEstimateInputs(inp.theta_B, bench, lam=1e12))
    assert np.max(np.abs(near - est)) < 1e-8


def test_random_instances_match_kkt_oracle():
    rng = np.random.default_rng(12)
    for _ in range(100):
        n = int(rng.integers(2, 15))
        w = rng.dirichlet(np.ones(n))
        phi = rng.uniform(0.2, 5.0, n)
        e = rng.uniform(0.05, 0.95, n)
        y2 = float(rng.uniform(0.1, 0.9))
        est = bayes_estimate(BayesEstimateInputs(e, Benchmark(y2, 0.01, w), phi))
        assert abs(est @ w - y2) < 1e-12
        assert np.allclose(est, kkt_oracle(e, w, phi, y2), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.05, 0.95), min_size=3, max_size=3), st.floats(0.1, 0.9),
       st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_inexact_path_is_monotone(e, y2, lam1, lam2):
    e = np.array(e)
    bench = Benchmark.equal_weights(y2, 0.01, 3)
    lo, hi = sorted((lam1, lam2))
    gap = lambda lam: abs(bayes_estimate(BayesEstimateInputs(e, bench, lam=lam)) @ bench.weights - y2)
    assert gap(lo) >= gap(hi) - 1e-15
    assert gap(hi) <= abs(e @ bench.weights - y2) + 1e-15


def test_zero_adjustment_and_validation():
    e = np.array([0.2, 0.3, 0.7])
    bench = Benchmark.equal_weights(float(e.mean()), 0.01, 3)
    for lam in (1.0, 1e6, math.inf):
        assert np.allclose(bayes_estimate(BayesEstimateInputs(e, bench, lam=lam)), e, atol=1e-16)
    with pytest.raises(ValueError):
        BayesEstimateInputs(e, bench, loss_weights=np.array([1.0, 0.0, 1.0]))
    with pytest.raises(ValueError):
        BayesEstimateInputs(e[:2], bench)
    with pytest.raises(ValueError):
        BayesEstimateInputs(e, bench, lam=0.0)


def test_out_of_range_estimates_are_flagged():
    bench = Benchmark(0.9, 0.01, np.array([0.5, 0.5]))
    est = bayes_estimate(BayesEstimateInputs(np.array([0.1, 0.95]), bench))
    assert out_of_range_rows(est)
    assert est[1] > 1.0


def test_project_draws():
    rng = np.random.default_rng(13)
    d = random_draws(rng, k=40, n=5)
    w = rng.dirichlet(np.ones(5))
    phi = rng.uniform(0.5, 2.0, 5)
    bench = Benchmark(0.3, 0.01, w)
    inp = BayesEstimateInputs(d.theta.mean(axis=0), bench, phi)
    out = project_draws(d, inp)
    assert np.max(np.abs(out.theta @ w - 0.3)) < 1e-12
    for row, src in zip(out.theta[:10], d.theta[:10]):
        assert np.allclose(row, kkt_oracle(src, w, phi, 0.3), atol=1e-12)
    fixed = project_draws(make_draws(out.theta), inp)
    assert np.allclose(fixed.theta, out.theta, atol=1e-15)
    const = project_draws(make_draws(np.tile(d.theta[0], (6, 1))), inp)
    assert np.all(const.theta == const.theta[0])
    with pytest.raises(ValueError):
        project_draws(d, BayesEstimateInputs(inp.theta_B, bench, lam=10.0))


def test_bayes_benchmark_result():
    rng = np.random.default_rng(14)
    d = random_draws(rng, k=200)
    bench = Benchmark.equal_weights(0.3, 0.01, 9)
    res = bayes_benchmark(d, bench)
    assert res.method == "bayes_exact" and abs(res.estimates @ bench.weights - 0.3) < 1e-12
    assert np.allclose(res.draws.theta.mean(axis=0), res.estimates, atol=1e-14)
    soft = bayes_benchmark(d, bench, lam=100.0)
    assert soft.method == "bayes_inexact" and soft.draws is None
