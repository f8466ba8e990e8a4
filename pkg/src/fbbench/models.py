"""Log posteriors for the unit-level binomial and area-level Fay-Herriot BYM2 models.

All log posteriors are densities with respect to the natural coordinates of
the state (``beta0``, ``u`` on the zero-sum subspace, ``v``, cluster effects
``e``, ``tau_b``, ``phi``, ``sigma2_e``), including every normalizing
constant. Out-of-support hyperparameters give ``-inf``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import special

from .core import (
    H_MARGINAL,
    Benchmark,
    ClusterDataset,
    DirectEstimates,
    benchmark_loglik,
    logit,
    marginal_prevalence,
)
from .spatial import (
    AreaGraph,
    Bym2Params,
    Bym2Structure,
    bym2_logprior,
    pc_sd_logpdf,
)

__all__ = [
    "AreaModelState",
    "InterceptShiftPrior",
    "Priors",
    "UnitModelState",
    "binomial_loglik",
    "fh_logposterior",
    "fh_logposterior_grad",
    "joint_benchmarked_logposterior",
    "unit_area_prediction",
    "unit_logposterior",
    "unit_logposterior_grad",
]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class InterceptShiftPrior:
    """Normal intercept prior centred at ``logit(y2)`` for the adjusted model."""

    mean: float
    variance: float = 1000.0

    def __post_init__(self):
        if not self.variance > 0.0:
            raise ValueError("intercept shift variance must be positive")

    @classmethod
    def for_benchmark(cls, bench: Benchmark, variance: float = 1000.0) -> "InterceptShiftPrior":
        return cls(logit(bench.y2), variance)

    def logpdf(self, beta0):
        beta0 = np.asarray(beta0, dtype=float)
        out = -0.5 * (beta0 - self.mean) ** 2 / self.variance - 0.5 * (
            _LOG_2PI + math.log(self.variance)
        )
        return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Priors:
    """Hyperprior settings.

    ``intercept_prior`` is ``"flat"`` or ``"normal"``; ``None`` picks the
    model default (flat for the unit model, N(0, 1000) for Fay-Herriot).
    ``cluster_prior`` is ``"pc"`` (on ``sigma_e``) or ``"loggamma"``
    (Gamma(shape, rate) on the precision ``1/sigma2_e``).
    """

    pc_U: float = 1.0
    pc_alpha: float = 0.01
    beta_a: float = 0.5
    beta_b: float = 0.5
    intercept_prior: str | None = None
    intercept_mean: float = 0.0
    intercept_variance: float = 1000.0
    cluster_prior: str = "pc"
    cluster_pc_U: float = 1.0
    cluster_pc_alpha: float = 0.01
    loggamma_shape: float = 0.1
    loggamma_rate: float = 0.1
    cluster_effect: bool = True

    def __post_init__(self):
        if self.intercept_prior not in (None, "flat", "normal"):
            raise ValueError("intercept_prior must be 'flat' or 'normal'")
        if self.cluster_prior not in ("pc", "loggamma"):
            raise ValueError("cluster_prior must be 'pc' or 'loggamma'")
        if not (self.pc_U > 0 and 0 < self.pc_alpha < 1 and self.beta_a > 0 and self.beta_b > 0):
            raise ValueError("invalid BYM2 hyperprior settings")
        if not self.intercept_variance > 0:
            raise ValueError("intercept variance must be positive")

    def with_shift(self, shift: InterceptShiftPrior) -> "Priors":
        return replace(
            self,
            intercept_prior="normal",
            intercept_mean=shift.mean,
            intercept_variance=shift.variance,
        )

    def resolved(self, model: str) -> "Priors":
        if self.intercept_prior is not None:
            return self
        return replace(self, intercept_prior="flat" if model == "unit" else "normal")

    def intercept_logpdf(self, beta0: float) -> float:
        if self.intercept_prior == "flat":
            return 0.0
        return -0.5 * (beta0 - self.intercept_mean) ** 2 / self.intercept_variance - 0.5 * (
            _LOG_2PI + math.log(self.intercept_variance)
        )

    def intercept_grad(self, beta0: float) -> float:
        if self.intercept_prior == "flat":
            return 0.0
        return -(beta0 - self.intercept_mean) / self.intercept_variance

    def cluster_logpdf(self, sigma2_e: float) -> float:
        """Prior log density of ``sigma2_e`` (as a variance)."""
        if not sigma2_e > 0.0:
            return -math.inf
        if self.cluster_prior == "pc":
            sigma = math.sqrt(sigma2_e)
            return pc_sd_logpdf(sigma, self.cluster_pc_U, self.cluster_pc_alpha) - math.log(
                2.0 * sigma
            )
        a, b = self.loggamma_shape, self.loggamma_rate
        return a * math.log(b) - special.gammaln(a) - (a + 1.0) * math.log(sigma2_e) - b / sigma2_e

    def cluster_grad(self, sigma2_e: float) -> float:
        if self.cluster_prior == "pc":
            lam = -math.log(self.cluster_pc_alpha) / self.cluster_pc_U
            return -lam / (2.0 * math.sqrt(sigma2_e)) - 1.0 / (2.0 * sigma2_e)
        a, b = self.loggamma_shape, self.loggamma_rate
        return -(a + 1.0) / sigma2_e + b / sigma2_e**2

    def cluster_median(self) -> float:
        """Prior median of ``sigma2_e``, used for initialization."""
        if self.cluster_prior == "pc":
            lam = -math.log(self.cluster_pc_alpha) / self.cluster_pc_U
            return (math.log(2.0) / lam) ** 2
        prec = special.gammaincinv(self.loggamma_shape, 0.5) / self.loggamma_rate
        return 1.0 / prec

    def tau_median(self) -> float:
        lam = -math.log(self.pc_alpha) / self.pc_U
        return (lam / math.log(2.0)) ** 2


@dataclass(frozen=True)
class UnitModelState:
    beta0: float
    bym2: Bym2Params
    e: np.ndarray
    sigma2_e: float

    def area_eta(self) -> np.ndarray:
        return self.beta0 + self.bym2.compose()

    def cluster_eta(self, area_id) -> np.ndarray:
        return self.area_eta()[np.asarray(area_id)] + np.asarray(self.e, dtype=float)


@dataclass(frozen=True)
class AreaModelState:
    beta0: float
    bym2: Bym2Params

    def area_eta(self) -> np.ndarray:
        return self.beta0 + self.bym2.compose()


def binomial_loglik(successes, trials, eta):
    """Per-record binomial log pmf at ``theta = expit(eta)``."""
    y = np.asarray(successes, dtype=float)
    n = np.asarray(trials, dtype=float)
    log_choose = special.gammaln(n + 1.0) - special.gammaln(y + 1.0) - special.gammaln(n - y + 1.0)
    return log_choose + y * eta - n * np.logaddexp(0.0, eta)


def unit_area_prediction(state: UnitModelState) -> np.ndarray:
    """Area prevalences with the cluster effect integrated out."""
    return marginal_prevalence(state.area_eta(), state.sigma2_e)


def _struct(graph) -> Bym2Structure:
    return graph if isinstance(graph, Bym2Structure) else Bym2Structure.for_graph(graph)


def _hyper_ok(bym2: Bym2Params) -> bool:
    return bym2.tau_b > 0.0 and 0.0 <= bym2.phi <= 1.0


def unit_logposterior(
    state: UnitModelState,
    data: ClusterDataset,
    graph: AreaGraph | Bym2Structure,
    priors: Priors = Priors(),
) -> float:
    priors = priors.resolved("unit")
    if not _hyper_ok(state.bym2) or not state.sigma2_e > 0.0:
        return -math.inf
    struct = _struct(graph)
    e = np.asarray(state.e, dtype=float)
    eta = state.cluster_eta(data.area_id)
    lp = float(np.sum(binomial_loglik(data.successes, data.trials, eta)))
    lp += bym2_logprior(state.bym2, struct, priors.pc_U, priors.pc_alpha, priors.beta_a, priors.beta_b)
    s2 = state.sigma2_e
    lp += float(-0.5 * np.sum(e * e) / s2 - 0.5 * e.size * (_LOG_2PI + math.log(s2)))
    lp += priors.cluster_logpdf(s2)
    lp += priors.intercept_logpdf(state.beta0)
    return lp


def fh_logposterior(
    state: AreaModelState,
    direct: DirectEstimates,
    graph: AreaGraph | Bym2Structure,
    priors: Priors = Priors(),
) -> float:
    priors = priors.resolved("fh")
    if not _hyper_ok(state.bym2):
        return -math.inf
    struct = _struct(graph)
    eta = state.area_eta()
    mask = direct.present
    resid = direct.logit_theta_hat[mask] - eta[mask]
    var = direct.logit_variance[mask]
    lp = float(np.sum(-0.5 * resid * resid / var - 0.5 * np.log(2.0 * math.pi * var)))
    lp += bym2_logprior(state.bym2, struct, priors.pc_U, priors.pc_alpha, priors.beta_a, priors.beta_b)
    lp += priors.intercept_logpdf(state.beta0)
    return lp


def benchmark_theta(state, theta_mode: str = "marginal") -> np.ndarray:
    """Area prevalences entering the benchmark likelihood."""
    if isinstance(state, UnitModelState):
        if theta_mode == "marginal":
            return unit_area_prediction(state)
        if theta_mode == "conditional":
            return special.expit(state.area_eta())
        raise ValueError("theta_mode must be 'marginal' or 'conditional'")
    return special.expit(state.area_eta())


def joint_benchmarked_logposterior(
    state,
    data,
    graph,
    priors: Priors,
    bench: Benchmark,
    theta_mode: str = "marginal",
) -> float:
    """Unbenchmarked log posterior plus the benchmark log likelihood.

    ``data`` is a ``ClusterDataset`` for a ``UnitModelState`` and
    ``DirectEstimates`` for an ``AreaModelState``.
    """
    if isinstance(state, UnitModelState):
        base = unit_logposterior(state, data, graph, priors)
    else:
        base = fh_logposterior(state, data, graph, priors)
    if not math.isfinite(base):
        return base
    return base + benchmark_loglik(benchmark_theta(state, theta_mode), bench)


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


def _bym2_grads(g_b, bym2: Bym2Params, struct: Bym2Structure, priors: Priors):
    """Chain a gradient w.r.t. ``b`` through the BYM2 map and add prior terms."""
    tau, phi, u, v = bym2.tau_b, bym2.phi, bym2.u, bym2.v
    rt = 1.0 / math.sqrt(tau)
    b = bym2.compose()
    lam = -math.log(priors.pc_alpha) / priors.pc_U
    g = {
        "v": g_b * rt * math.sqrt(1.0 - phi) - v,
        "u": g_b * rt * math.sqrt(phi) - struct.q_scaled @ u,
        "tau_b": float(g_b @ (-0.5 * b / tau)) - 1.5 / tau + 0.5 * lam * tau**-1.5,
    }
    db_dphi = rt * (-0.5 * v / math.sqrt(1.0 - phi) + 0.5 * u / math.sqrt(phi))
    g["phi"] = (
        float(g_b @ db_dphi) + (priors.beta_a - 1.0) / phi - (priors.beta_b - 1.0) / (1.0 - phi)
    )
    return g


def _benchmark_grad_eta(eta, s2, bench: Benchmark, theta_mode: str):
    """Gradient of the benchmark term w.r.t. area ``eta`` and ``sigma2_e``."""
    if theta_mode == "marginal":
        scale = 1.0 / math.sqrt(1.0 + H_MARGINAL**2 * s2)
    else:
        scale = 1.0
    theta = special.expit(eta * scale)
    dev = float(theta @ bench.weights) - bench.y2
    d_theta = -dev / bench.sigma2_y2 * bench.weights
    slope = theta * (1.0 - theta)
    g_eta = d_theta * slope * scale
    g_s2 = 0.0
    if theta_mode == "marginal":
        g_s2 = float(d_theta @ (slope * eta * (-0.5) * H_MARGINAL**2 * scale**3))
    return g_eta, g_s2


def unit_logposterior_grad(
    state: UnitModelState,
    data: ClusterDataset,
    graph,
    priors: Priors = Priors(),
    bench: Benchmark | None = None,
    theta_mode: str = "marginal",
) -> dict:
    """Analytic gradient of ``unit_logposterior`` (plus the benchmark term if given).

    Keys: ``beta0``, ``v``, ``u`` (ambient gradient), ``e``, ``tau_b``,
    ``phi``, ``sigma2_e``.
    """
    priors = priors.resolved("unit")
    struct = _struct(graph)
    e = np.asarray(state.e, dtype=float)
    s2 = state.sigma2_e
    eta_c = state.cluster_eta(data.area_id)
    r = data.successes - data.trials * special.expit(eta_c)
    g_b = np.bincount(data.area_id, weights=r, minlength=struct.n)
    g_s2 = -0.5 * e.size / s2 + 0.5 * float(e @ e) / s2**2 + priors.cluster_grad(s2)
    if bench is not None:
        g_eta_b, g_s2_b = _benchmark_grad_eta(state.area_eta(), s2, bench, theta_mode)
        g_b = g_b + g_eta_b
        g_s2 += g_s2_b
    out = _bym2_grads(g_b, state.bym2, struct, priors)
    out["beta0"] = float(g_b.sum()) + priors.intercept_grad(state.beta0)
    out["e"] = r - e / s2
    out["sigma2_e"] = g_s2
    return out


def fh_logposterior_grad(
    state: AreaModelState,
    direct: DirectEstimates,
    graph,
    priors: Priors = Priors(),
    bench: Benchmark | None = None,
) -> dict:
    priors = priors.resolved("fh")
    struct = _struct(graph)
    eta = state.area_eta()
    g_b = np.zeros(struct.n)
    m = direct.present
    g_b[m] = (direct.logit_theta_hat[m] - eta[m]) / direct.logit_variance[m]
    if bench is not None:
        g_b = g_b + _benchmark_grad_eta(eta, 0.0, bench, "conditional")[0]
    out = _bym2_grads(g_b, state.bym2, struct, priors)
    out["beta0"] = float(g_b.sum()) + priors.intercept_grad(state.beta0)
    return out
