"""Benchmarking methods applied to posterior draws or point estimates.

Fully Bayesian: rejection sampling of unbenchmarked draws and an
independence Metropolis-Hastings chain over draws of the intercept-shifted
model. Baselines: raking by a ratio of medians and the benchmarked Bayes
estimate (exact or inexact), with its per-draw projection.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .core import Benchmark, BenchmarkResult, DrawMatrix, Method, benchmark_loglik
from .models import InterceptShiftPrior

__all__ = [
    "BayesEstimateInputs",
    "BenchmarkInconsistent",
    "MHBenchmarker",
    "RakingError",
    "RejectionBenchmarker",
    "acceptance_probability",
    "bayes_benchmark",
    "bayes_estimate",
    "mh_acceptance",
    "mh_benchmark",
    "out_of_range_rows",
    "project_draws",
    "rake_benchmark",
    "rejection_benchmark",
]

log = logging.getLogger(__name__)


class BenchmarkInconsistent(RuntimeError):
    """No draw was accepted: the benchmark conflicts with the model."""

    def __init__(self, max_probability: float, n_considered: int):
        self.max_probability = float(max_probability)
        self.n_considered = int(n_considered)
        super().__init__(
            f"benchmark inconsistent with model: 0 of {n_considered} draws accepted "
            f"(largest acceptance probability {max_probability:.3g})"
        )


class RakingError(ValueError):
    def __init__(self, areas):
        self.areas = sorted(int(a) for a in areas)
        super().__init__(f"raking pushes draws to 1 or above in areas {self.areas}")


# ---------------------------------------------------------------------------
# Rejection sampling
# ---------------------------------------------------------------------------


def acceptance_probability(theta, bench: Benchmark) -> np.ndarray:
    """``exp(-(sum w theta - y2)^2 / (2 sigma2))`` per row of ``theta``."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    dev = theta @ bench.weights - bench.y2
    return np.exp(-0.5 * dev * dev / bench.sigma2_y2)


class RejectionBenchmarker:
    """Streams unbenchmarked draws through the rejection step.

    Draws are considered in the order given and never reused. ``feed`` can
    be called repeatedly with fresh draws until enough are accepted.
    """

    def __init__(self, bench: Benchmark, rng_seed=0, target_accepted: int | None = None):
        self.bench = bench
        self.rng = np.random.default_rng(rng_seed)
        self.target = target_accepted
        self.n_considered = 0
        self.max_prob = 0.0
        self._accepted: list[DrawMatrix] = []
        self.n_accepted = 0

    @property
    def done(self) -> bool:
        return self.target is not None and self.n_accepted >= self.target

    def feed(self, draws: DrawMatrix) -> int:
        """Consider ``draws`` row by row; return the number accepted from them."""
        if self.done:
            return 0
        prob = acceptance_probability(draws.theta, self.bench)
        u = self.rng.random(prob.size)
        acc = u < prob
        if self.target is not None:
            need = self.target - self.n_accepted
            idx = np.flatnonzero(acc)
            if idx.size >= need:
                stop = idx[need - 1] + 1
                acc[stop:] = False
                prob = prob[:stop]
        considered = prob.size
        self.n_considered += considered
        self.max_prob = max(self.max_prob, float(prob.max()))
        rows = np.flatnonzero(acc)
        if rows.size:
            # successive feeds continue the same chains, so chain ids and
            # draw indices are kept and rows regrouped on output
            self._accepted.append(draws.take(rows))
        self.n_accepted += rows.size
        return int(rows.size)

    @property
    def acceptance_rate(self) -> float:
        return self.n_accepted / self.n_considered if self.n_considered else 0.0

    def accepted_draws(self) -> DrawMatrix:
        if not self._accepted:
            raise BenchmarkInconsistent(self.max_prob, self.n_considered)
        if len(self._accepted) > 1:
            self._accepted = [DrawMatrix.concat(self._accepted)]
        return self._accepted[0]

    def result(self) -> BenchmarkResult:
        draws = self.accepted_draws()
        return BenchmarkResult(
            method=Method.REJECTION,
            draws=draws,
            acceptance_rate=self.acceptance_rate,
            info={
                "n_considered": self.n_considered,
                "n_accepted": self.n_accepted,
                "max_acceptance_probability": self.max_prob,
            },
        )


def rejection_benchmark(
    draws: DrawMatrix, bench: Benchmark, target_accepted: int | None = None, rng_seed=0
) -> BenchmarkResult:
    """Accept each draw independently with its benchmark acceptance probability.

    Raises ``BenchmarkInconsistent`` when nothing is accepted.
    """
    sampler = RejectionBenchmarker(bench, rng_seed, target_accepted)
    sampler.feed(draws)
    res = sampler.result()
    if target_accepted is not None and sampler.n_accepted < target_accepted:
        res.warnings.append(
            f"only {sampler.n_accepted} of {target_accepted} requested draws accepted"
        )
    return res


# ---------------------------------------------------------------------------
# Independence Metropolis-Hastings
# ---------------------------------------------------------------------------


def mh_acceptance(bll_new, lshift_new, bll_old, lshift_old) -> float:
    """``min(1, pi(y2|new) pi+(beta_old) / (pi(y2|old) pi+(beta_new)))`` from log terms."""
    logr = (bll_new - lshift_new) - (bll_old - lshift_old)
    if math.isnan(logr):
        raise FloatingPointError("non-finite Metropolis-Hastings ratio")
    return 1.0 if logr >= 0.0 else math.exp(logr)


class MHBenchmarker:
    """Independence sampler whose proposals are rows of the adjusted-model draws.

    Every chain starts at its own pool row and proposes further rows. By
    default a proposal is a uniformly chosen row not yet used by any
    chain; ``replace=True`` draws rows uniformly with replacement instead.
    ``add_rows`` tops up the pool so the chains can be extended.
    """

    def __init__(
        self,
        bench: Benchmark,
        shift_prior: InterceptShiftPrior,
        n_chains: int = 4,
        n_warmup: int = 1000,
        rng_seed=0,
        replace: bool = False,
        floor: float = 0.01,
    ):
        if n_chains < 1 or n_warmup < 0:
            raise ValueError("need n_chains >= 1 and n_warmup >= 0")
        self.bench = bench
        self.shift = shift_prior
        self.n_chains = n_chains
        self.n_warmup = n_warmup
        self.replace = replace
        self.floor = floor
        self.rng = np.random.default_rng(rng_seed)
        self.pool: DrawMatrix | None = None
        self._log_w = np.empty(0)  # log pi(y2|row) - log pi+(beta0_row)
        self._bll = np.empty(0)
        self._lshift = np.empty(0)
        self._unused = np.empty(0, dtype=np.int64)
        self.current: list[int] | None = None
        self.n_accepted = 0
        self.n_proposed = 0
        self._visited: list[list[np.ndarray]] = [[] for _ in range(n_chains)]
        self._counts = [0] * n_chains

    def add_rows(self, draws: DrawMatrix) -> None:
        bll = np.atleast_1d(benchmark_loglik(draws.theta, self.bench))
        lsh = np.atleast_1d(self.shift.logpdf(draws.beta0))
        if not (np.all(np.isfinite(bll)) and np.all(np.isfinite(lsh))):
            raise FloatingPointError("non-finite benchmark or shift-prior term in proposal rows")
        start = 0 if self.pool is None else self.pool.n_draws
        if self.pool is None:
            self.pool = draws
        else:
            self.pool = _stack_any(self.pool, draws)
        self._bll = np.concatenate([self._bll, bll])
        self._lshift = np.concatenate([self._lshift, lsh])
        fresh = np.arange(start, start + draws.n_draws)
        unused = np.concatenate([self._unused, fresh])
        self._unused = self.rng.permutation(unused)

    @property
    def n_available(self) -> int:
        return self._unused.size

    def _next_row(self) -> int:
        if self.replace:
            return int(self.rng.integers(self.pool.n_draws))
        if self._unused.size == 0:
            raise RuntimeError("proposal pool exhausted; add more adjusted draws")
        row = int(self._unused[0])
        self._unused = self._unused[1:]
        return row

    def rows_needed(self, n_draws: int) -> int:
        """Unused rows the next ``run(n_draws)`` call consumes."""
        init = self.n_chains * (1 + self.n_warmup) if self.current is None else 0
        return 0 if self.replace else init + self.n_chains * n_draws

    def _step(self, c: int) -> bool:
        cur = self.current[c]
        prop = self._next_row()
        a = mh_acceptance(self._bll[prop], self._lshift[prop], self._bll[cur], self._lshift[cur])
        if self.rng.random() < a:
            self.current[c] = prop
            return True
        return False

    def run(self, n_draws: int) -> DrawMatrix:
        """Advance every chain ``n_draws`` recorded steps; return the new visited rows."""
        if self.pool is None:
            raise RuntimeError("no proposal rows added")
        need = self.rows_needed(n_draws)
        if need > self.n_available and not self.replace:
            raise RuntimeError(
                f"need {need} unused proposal rows, only {self.n_available} available"
            )
        if self.current is None:
            self.current = [self._next_row() for _ in range(self.n_chains)]
            for c in range(self.n_chains):
                for _ in range(self.n_warmup):
                    self._step(c)
        new = []
        for c in range(self.n_chains):
            rows = np.empty(n_draws, dtype=np.int64)
            for k in range(n_draws):
                self.n_accepted += self._step(c)
                rows[k] = self.current[c]
            self.n_proposed += n_draws
            self._visited[c].append(rows)
            part = _pool_rows(self.pool, rows, c, self._counts[c])
            self._counts[c] += n_draws
            new.append(part)
        return DrawMatrix.concat(new)

    def visited_rows(self) -> list[np.ndarray]:
        return [np.concatenate(v) if v else np.empty(0, np.int64) for v in self._visited]

    @property
    def acceptance_rate(self) -> float:
        return self.n_accepted / self.n_proposed if self.n_proposed else 0.0

    def draws(self) -> DrawMatrix:
        rows = self.visited_rows()
        parts = []
        for c, r in enumerate(rows):
            parts.append(_pool_rows(self.pool, r, c, 0))
        return DrawMatrix.concat(parts)

    def result(self) -> BenchmarkResult:
        rate = self.acceptance_rate
        warnings = []
        if rate < self.floor:
            msg = f"MH acceptance rate {rate:.4f} is below the floor {self.floor}"
            log.warning(msg)
            warnings.append(msg)
        return BenchmarkResult(
            method=Method.METROPOLIS_HASTINGS,
            draws=self.draws(),
            acceptance_rate=rate,
            warnings=warnings,
            info={
                "n_chains": self.n_chains,
                "n_warmup": self.n_warmup,
                "n_proposed": self.n_proposed,
                "replace": self.replace,
                "pool_size": self.pool.n_draws,
            },
        )


def _stack_any(a: DrawMatrix, b: DrawMatrix) -> DrawMatrix:
    # pool rows only need alignment, not chain grouping
    return DrawMatrix(
        theta=np.concatenate([a.theta, b.theta]),
        eta=np.concatenate([a.eta, b.eta]),
        beta0=np.concatenate([a.beta0, b.beta0]),
        hypers={k: np.concatenate([a.hypers[k], b.hypers[k]]) for k in a.hypers},
        chain_ids=np.zeros(a.n_draws + b.n_draws, dtype=np.int64),
        link=a.link,
        seed=a.seed,
        draw_index=np.arange(a.n_draws + b.n_draws),
    )


def _pool_rows(pool: DrawMatrix, rows, chain: int, start: int) -> DrawMatrix:
    return DrawMatrix(
        theta=pool.theta[rows],
        eta=pool.eta[rows],
        beta0=pool.beta0[rows],
        hypers={k: v[rows] for k, v in pool.hypers.items()},
        chain_ids=np.full(len(rows), chain),
        link=pool.link,
        seed=pool.seed,
        draw_index=np.arange(start, start + len(rows)),
    )


def mh_benchmark(
    adjusted_draws: DrawMatrix,
    bench: Benchmark,
    shift_prior: InterceptShiftPrior,
    n_chains: int = 4,
    n_warmup: int = 1000,
    n_draws: int | None = None,
    rng_seed=0,
    replace: bool = False,
    floor: float = 0.01,
) -> BenchmarkResult:
    """Independence MH over the adjusted draws.

    ``n_draws`` defaults to as many recorded steps per chain as the pool
    allows without reusing rows.
    """
    mh = MHBenchmarker(bench, shift_prior, n_chains, n_warmup, rng_seed, replace, floor)
    mh.add_rows(adjusted_draws)
    if n_draws is None:
        n_draws = adjusted_draws.n_draws // n_chains - 1 - n_warmup
        if n_draws < 1:
            raise ValueError("too few adjusted draws for the requested chains and warmup")
    mh.run(n_draws)
    return mh.result()


# ---------------------------------------------------------------------------
# Raking
# ---------------------------------------------------------------------------


def rake_benchmark(draws: DrawMatrix, bench: Benchmark) -> BenchmarkResult:
    """Divide every draw by ``R = sum_i w_i median(theta_i) / y2``."""
    med = np.median(draws.theta, axis=0)
    national = float(med @ bench.weights)
    ratio = national / bench.y2
    if not ratio > 0.0:
        raise ValueError("raking ratio must be positive")
    raked = draws.theta / ratio
    bad = np.flatnonzero(np.any(raked >= 1.0, axis=0))
    if bad.size:
        raise RakingError(bad)
    return BenchmarkResult(
        method=Method.RAKING,
        draws=draws.with_theta(raked),
        info={"ratio": ratio, "national_unbenchmarked": national},
    )


# ---------------------------------------------------------------------------
# Benchmarked Bayes estimate
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BayesEstimateInputs:
    """``lam=math.inf`` selects the exact estimate."""

    theta_B: np.ndarray
    bench: Benchmark
    loss_weights: np.ndarray | None = None
    lam: float = math.inf

    def __post_init__(self):
        theta = np.asarray(self.theta_B, dtype=float)
        object.__setattr__(self, "theta_B", theta)
        n = self.bench.n_areas
        if theta.shape != (n,):
            raise ValueError("theta_B must have one entry per area")
        phi = np.ones(n) if self.loss_weights is None else np.asarray(self.loss_weights, float)
        if phi.shape != (n,) or not np.all(phi > 0.0):
            raise ValueError("loss weights must be positive, one per area")
        object.__setattr__(self, "loss_weights", phi)
        if not self.lam > 0.0:
            raise ValueError("lambda must be positive")

    @property
    def exact(self) -> bool:
        return math.isinf(self.lam)

    @property
    def r(self) -> np.ndarray:
        return self.bench.weights / self.loss_weights

    @property
    def s(self) -> float:
        w = self.bench.weights
        return float(np.sum(w * w / self.loss_weights))

    @property
    def gain(self) -> float:
        """``1/s`` for the exact estimate, ``1/(s + 1/lambda)`` otherwise."""
        return 1.0 / self.s if self.exact else 1.0 / (self.s + 1.0 / self.lam)


def _adjust(theta, inputs: BayesEstimateInputs) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    dev = inputs.bench.y2 - theta @ inputs.bench.weights
    return theta + inputs.gain * np.multiply.outer(dev, inputs.r)


def bayes_estimate(inputs: BayesEstimateInputs) -> np.ndarray:
    """Benchmarked Bayes point estimates; may leave (0, 1), see ``out_of_range_rows``."""
    return _adjust(inputs.theta_B, inputs)


def out_of_range_rows(theta) -> np.ndarray:
    """Boolean flag per row (or a scalar for a vector): any entry outside (0, 1)."""
    theta = np.asarray(theta, dtype=float)
    bad = (theta <= 0.0) | (theta >= 1.0)
    return bad.any(axis=-1)


def project_draws(draws: DrawMatrix, inputs: BayesEstimateInputs) -> DrawMatrix:
    """Apply the exact benchmarked-estimate map to every draw row."""
    if not inputs.exact:
        raise ValueError("draw projection is defined for the exact estimate only")
    projected = _adjust(draws.theta, inputs)
    n_bad = int(out_of_range_rows(projected).sum())
    if n_bad:
        log.warning("%d projected rows leave (0, 1)", n_bad)
    return draws.with_theta(projected)


def bayes_benchmark(
    draws: DrawMatrix,
    bench: Benchmark,
    lam: float = math.inf,
    loss_weights=None,
    project: bool = True,
) -> BenchmarkResult:
    """Benchmarked Bayes estimate from the posterior means of ``draws``.

    In exact mode the projected draws are attached as well.
    """
    inputs = BayesEstimateInputs(draws.theta.mean(axis=0), bench, loss_weights, lam)
    est = bayes_estimate(inputs)
    warnings = []
    if out_of_range_rows(est):
        warnings.append("benchmarked estimate leaves (0, 1) in some areas")
    projected = None
    info = {"lambda": None if inputs.exact else lam, "s": inputs.s}
    if inputs.exact and project:
        projected = project_draws(draws, inputs)
        n_bad = int(out_of_range_rows(projected.theta).sum())
        info["n_projected_out_of_range"] = n_bad
        if n_bad:
            warnings.append(f"{n_bad} projected draws leave (0, 1)")
    return BenchmarkResult(
        method=Method.BAYES_ESTIMATE_EXACT if inputs.exact else Method.BAYES_ESTIMATE_INEXACT,
        draws=projected,
        estimates=est,
        warnings=warnings,
        info=info,
    )
