"""Split-Rhat, rank-normalized split-Rhat and bulk effective sample size.

Every function takes a (chains, draws) array. Chains are split in half
before any computation, so one chain of length >= 8 is already enough.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import fft, special, stats

__all__ = [
    "DiagnosticsReport",
    "RunnerResult",
    "bulk_ess",
    "diagnose",
    "ess_to_target_runner",
    "min_theta_ess",
    "rank_normalize",
    "rank_normalized_split_rhat",
    "split_chains",
    "split_rhat",
]

RHAT_THRESHOLD = 1.01
ESS_THRESHOLD = 400.0


def split_chains(chains) -> np.ndarray:
    x = np.asarray(chains, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    m = x.shape[1] // 2
    if m < 4:
        raise ValueError("need at least 4 draws per half chain")
    # an odd middle draw is dropped
    return np.concatenate([x[:, :m], x[:, x.shape[1] - m :]], axis=0)


def _rhat(halves: np.ndarray) -> float:
    m = halves.shape[1]
    w = float(np.mean(np.var(halves, axis=1, ddof=1)))
    b_over_m = float(np.var(halves.mean(axis=1), ddof=1))
    if w == 0.0:
        return math.inf
    var_plus = (m - 1) / m * w + b_over_m
    return math.sqrt(var_plus / w)


def split_rhat(chains) -> float:
    """Gelman-Rubin potential scale reduction on half chains.

    Constant input (zero within-chain variance) returns ``inf``.
    """
    return _rhat(split_chains(chains))


def rank_normalize(x) -> np.ndarray:
    """Average ranks over all draws mapped through ``Phi^-1((r - 3/8) / (S + 1/4))``."""
    x = np.asarray(x, dtype=float)
    ranks = stats.rankdata(x, method="average", axis=None).reshape(x.shape)
    return special.ndtri((ranks - 0.375) / (x.size + 0.25))


def rank_normalized_split_rhat(chains) -> float:
    halves = split_chains(chains)
    if np.all(halves == halves.flat[0]) or np.all(np.var(halves, axis=1) == 0.0):
        return math.inf
    return _rhat(rank_normalize(halves))


def _autocov(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of each row at every lag, via FFT."""
    n = x.shape[1]
    xc = x - x.mean(axis=1, keepdims=True)
    size = fft.next_fast_len(2 * n)
    f = fft.rfft(xc, n=size, axis=1)
    acov = fft.irfft(f * np.conj(f), n=size, axis=1)[:, :n]
    return acov / n


def _ess(halves: np.ndarray) -> float:
    """Multi-chain ESS with Geyer's initial monotone sequence truncation."""
    n_chain, n = halves.shape
    total = n_chain * n
    acov = _autocov(halves)
    chain_var = acov[:, 0] * n / (n - 1.0)
    w = float(chain_var.mean())
    var_plus = w * (n - 1.0) / n
    if n_chain > 1:
        var_plus += float(np.var(halves.mean(axis=1), ddof=1))
    if w == 0.0 or var_plus == 0.0:
        return math.nan
    mean_acov = acov.mean(axis=0)
    rho = 1.0 - (w - mean_acov) / var_plus
    rho[0] = 1.0

    # initial positive sequence on consecutive pair sums
    pairs = []
    t = 0
    while t + 1 < n:
        s = rho[t] + rho[t + 1]
        if s < 0.0:
            break
        pairs.append(s)
        t += 2
    if not pairs:
        pairs = [rho[0]]
    pairs = np.minimum.accumulate(np.asarray(pairs))
    tau = -1.0 + 2.0 * float(pairs.sum())
    tau = max(tau, 1.0 / math.log10(total))
    return total / tau


def bulk_ess(chains) -> float:
    """Bulk ESS: ESS of the rank-normalized split chains.

    Capped at ``S * log10(S)`` for anticorrelated input; NaN for constant input.
    """
    halves = split_chains(chains)
    if np.all(halves == halves.flat[0]):
        return math.nan
    return _ess(rank_normalize(halves))


@dataclass
class DiagnosticsReport:
    names: list[str]
    split_rhat: np.ndarray
    rank_normalized_split_rhat: np.ndarray
    bulk_ess: np.ndarray
    n_chains: int
    n_draws_per_chain: int
    rhat_threshold: float = RHAT_THRESHOLD
    ess_threshold: float = ESS_THRESHOLD

    @property
    def rhat_ok(self) -> np.ndarray:
        return self.rank_normalized_split_rhat < self.rhat_threshold

    @property
    def ess_ok(self) -> np.ndarray:
        return self.bulk_ess > self.ess_threshold

    @property
    def min_bulk_ess(self) -> float:
        return float(np.nanmin(self.bulk_ess))

    @property
    def max_rhat(self) -> float:
        return float(np.nanmax(self.rank_normalized_split_rhat))

    @property
    def converged(self) -> bool:
        return bool(np.all(self.rhat_ok) and np.all(self.ess_ok))

    def to_dict(self) -> dict:
        return {
            "n_chains": self.n_chains,
            "n_draws_per_chain": self.n_draws_per_chain,
            "rhat_threshold": self.rhat_threshold,
            "ess_threshold": self.ess_threshold,
            "converged": self.converged,
            "quantities": {
                name: {
                    "split_rhat": _num(self.split_rhat[j]),
                    "rank_normalized_split_rhat": _num(self.rank_normalized_split_rhat[j]),
                    "bulk_ess": _num(self.bulk_ess[j]),
                    "rhat_ok": bool(self.rhat_ok[j]),
                    "ess_ok": bool(self.ess_ok[j]),
                }
                for j, name in enumerate(self.names)
            },
        }


def _num(x) -> float | None:
    x = float(x)
    return x if math.isfinite(x) else None


def diagnose(draws, rhat_threshold=RHAT_THRESHOLD, ess_threshold=ESS_THRESHOLD) -> DiagnosticsReport:
    """Diagnostics for every area prevalence, the intercept and hyperparameters of a DrawMatrix."""
    quantities = {f"theta[{i}]": draws.theta[:, i] for i in range(draws.n_areas)}
    quantities["beta0"] = draws.beta0
    quantities.update(draws.hypers)
    names, sr, rr, ess = [], [], [], []
    shape = None
    for name, values in quantities.items():
        arr = draws.chain_array(values)
        shape = arr.shape
        if np.all(arr == arr.flat[0]):
            continue
        names.append(name)
        sr.append(split_rhat(arr))
        rr.append(rank_normalized_split_rhat(arr))
        ess.append(bulk_ess(arr))
    return DiagnosticsReport(
        names=names,
        split_rhat=np.array(sr),
        rank_normalized_split_rhat=np.array(rr),
        bulk_ess=np.array(ess),
        n_chains=shape[0],
        n_draws_per_chain=shape[1],
        rhat_threshold=rhat_threshold,
        ess_threshold=ess_threshold,
    )


def min_theta_ess(draws) -> float:
    """Smallest bulk ESS over the area prevalences."""
    return float(min(bulk_ess(draws.chain_array(draws.theta[:, i])) for i in range(draws.n_areas)))


@dataclass
class RunnerResult:
    output: object
    achieved: float
    target: float
    n_increments: int
    seconds: float
    reached: bool
    history: list[float] = field(default_factory=list)


def ess_to_target_runner(
    extend: Callable[[], object],
    measure: Callable[[object], float],
    target: float = 1000.0,
    max_increments: int = 1000,
    setup: Callable[[], None] | None = None,
) -> RunnerResult:
    """Call ``extend`` until ``measure(output) >= target``.

    ``measure`` is the bulk ESS for MCMC-type outputs or the accepted count
    for rejection sampling. Wall time covers ``setup`` (model fitting) and
    every increment. Hitting ``max_increments`` returns a result with
    ``reached == False`` instead of raising.
    """
    start = time.perf_counter()
    if setup is not None:
        setup()
    history = []
    output = None
    achieved = 0.0
    for k in range(1, max_increments + 1):
        output = extend()
        achieved = float(measure(output))
        history.append(achieved)
        if achieved >= target:
            return RunnerResult(output, achieved, target, k, time.perf_counter() - start, True, history)
    return RunnerResult(
        output, achieved, target, max_increments, time.perf_counter() - start, False, history
    )
