"""Adaptive random-walk Metropolis-within-Gibbs for the BYM2 models.

Sampling happens on unconstrained scales: ``log tau_b``, ``logit phi`` and
``log sigma2_e``; cluster effects are non-centred (``e = sigma_e * z``).
Besides plain random-walk updates of each block, every sweep includes moves
that keep the likelihood fixed (an intercept/iid-effect ridge shift, a
``tau_b`` rescale and a ``phi`` rotation that hold ``b`` constant, and a
centred ``sigma_e`` rescale). These cancel the strong posterior
correlations between the intercept, the random effects and their scales.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .core import (
    H_MARGINAL,
    Benchmark,
    ClusterDataset,
    DirectEstimates,
    DrawMatrix,
    direct_estimates,
    marginal_prevalence,
)
from .models import Priors
from .spatial import AreaGraph, Bym2Structure, pc_precision_logpdf

__all__ = [
    "InitializationError",
    "MCMCRun",
    "SamplerConfig",
    "fit_joint_oracle",
    "fit_unbenchmarked",
]

log = logging.getLogger(__name__)

PARAMS = ("beta0", "v", "u", "z", "tau_b", "phi", "sigma2_e")

# move name -> parameters it changes
MOVES = {
    "z": {"z"},
    "v": {"v"},
    "u": {"u"},
    "u_fixed_b": {"u", "v"},
    "beta0": {"beta0"},
    "beta0_ridge": {"beta0", "v"},
    "tau": {"tau_b"},
    "tau_fixed_b": {"tau_b", "v", "u"},
    "phi": {"phi"},
    "phi_fixed_b": {"phi", "v"},
    "sigma": {"sigma2_e"},
    "sigma_fixed_e": {"sigma2_e", "z"},
}


class InitializationError(RuntimeError):
    pass


@dataclass
class SamplerConfig:
    n_chains: int = 4
    n_warmup: int = 1000
    n_draws: int = 1000
    seed: int = 0
    thin: int = 1
    target_accept: float = 0.234
    init_step: float = 0.1
    # covariance adaptation of the structured block starts after this
    # fraction of warmup and is refreshed every ``adapt_every`` iterations
    adapt_start: float = 0.2
    adapt_every: int = 50
    scan: str = "systematic"
    frozen: frozenset = field(default_factory=frozenset)
    max_init_tries: int = 100

    def __post_init__(self):
        if self.n_chains < 1 or self.n_warmup < 0 or self.n_draws < 1 or self.thin < 1:
            raise ValueError("need n_chains >= 1, n_warmup >= 0, n_draws >= 1, thin >= 1")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target acceptance must lie in (0, 1)")
        if self.scan not in ("systematic", "random"):
            raise ValueError("scan must be 'systematic' or 'random'")
        unknown = set(self.frozen) - set(PARAMS)
        if unknown:
            raise ValueError(f"unknown frozen parameters {sorted(unknown)}")
        self.frozen = frozenset(self.frozen)


class _Target:
    """Model data laid out as records with a per-record log likelihood in ``eta``."""

    def __init__(self, model, data, graph, priors, bench, theta_mode):
        if model not in ("unit", "fh"):
            raise ValueError("model must be 'unit' or 'fh'")
        self.model = model
        self.struct = graph if isinstance(graph, Bym2Structure) else Bym2Structure.for_graph(graph)
        self.n = self.struct.n
        self.priors = priors.resolved(model)
        self.bench = bench
        self.theta_mode = theta_mode
        if bench is not None and bench.n_areas != self.n:
            raise ValueError("benchmark weights do not match the graph")
        self.has_e = model == "unit" and self.priors.cluster_effect

        if model == "unit":
            if data is None:
                self.area = np.empty(0, dtype=np.int64)
                self.y = np.empty(0)
                self.ntr = np.empty(0)
                self.pooled = None
            else:
                if data.n_areas != self.n:
                    raise ValueError("dataset and graph disagree on the number of areas")
                d = data.sorted_by_area()
                self.area = d.area_id.copy()
                self.y = d.successes.astype(float)
                self.ntr = d.trials.astype(float)
                self.pooled = d.pooled_prevalence()
                if not 0.0 < self.pooled < 1.0:
                    self.pooled = None
        else:
            if isinstance(data, ClusterDataset):
                data = direct_estimates(data)
            if data is None:
                data = DirectEstimates(*(np.full(self.n, np.nan) for _ in range(2)),
                                       np.zeros(self.n, bool), np.full(self.n, np.nan))
            if data.n_areas != self.n:
                raise ValueError("direct estimates and graph disagree on the number of areas")
            m = data.present
            self.area = np.flatnonzero(m)
            self.y = data.logit_theta_hat[m]
            self.var = data.logit_variance[m]
            self.pooled = None if not m.any() else float(special.expit(np.mean(self.y)))
        self.n_rec = self.area.size
        self.starts = np.searchsorted(self.area, np.arange(self.n + 1))

    def rec_ll(self, eta_r, sl=slice(None)):
        if self.model == "unit":
            return self.y[sl] * eta_r - self.ntr[sl] * np.logaddexp(0.0, eta_r)
        d = self.y[sl] - eta_r
        return -0.5 * d * d / self.var[sl]

    def bench_ll(self, eta_a, s2):
        if self.bench is None:
            return 0.0
        theta = self.bench_theta(eta_a, s2)
        dev = float(theta @ self.bench.weights) - self.bench.y2
        return -0.5 * dev * dev / self.bench.sigma2_y2

    def bench_theta(self, eta_a, s2):
        if self.model == "unit" and self.theta_mode == "marginal":
            return special.expit(eta_a / math.sqrt(1.0 + H_MARGINAL**2 * s2))
        return special.expit(eta_a)

    # log prior on the unconstrained scales, including the Jacobian
    def lp_tau(self, lt):
        return pc_precision_logpdf(math.exp(lt), self.priors.pc_U, self.priors.pc_alpha) + lt

    def lp_phi(self, lp):
        a, b = self.priors.beta_a, self.priors.beta_b
        log_phi = -np.logaddexp(0.0, -lp)
        log_1m = -np.logaddexp(0.0, lp)
        return float(a * log_phi + b * log_1m - special.betaln(a, b))

    def lp_s2(self, ls):
        return self.priors.cluster_logpdf(math.exp(ls)) + ls

    def lp_beta0(self, b0):
        return self.priors.intercept_logpdf(b0)


class _Chain:
    def __init__(self, target: _Target, cfg: SamplerConfig, index: int):
        self.t = target
        self.cfg = cfg
        self.index = index
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, index]))
        n = target.n
        frozen = cfg.frozen
        moves = [
            m for m, touched in MOVES.items() if not (touched & frozen)
        ]
        if not target.has_e:
            moves = [m for m in moves if m not in ("z", "sigma", "sigma_fixed_e")]
        if n == 1:
            moves = [m for m in moves if m not in ("u", "u_fixed_b")]
        self.moves = moves
        self.scale = {m: cfg.init_step for m in moves}
        self.scale["beta0_ridge"] = self.scale.get("beta0_ridge", cfg.init_step)
        self.vec_scale = {"z": np.full(target.n_rec, 0.5), "v": np.full(n, 0.5)}
        self.stats = {m: [0, 0] for m in moves}
        self.warm_stats = {m: [0, 0] for m in moves}
        self.t_adapt = 0
        self.adapting = True
        # proposal factor for the structured block, starts at the prior covariance
        self.u_factor = self._factor(target.struct.covariance)
        self._u_sum = np.zeros(n)
        self._u_outer = np.zeros((n, n))
        self._u_count = 0
        self._init_state()

    # -- state -------------------------------------------------------------
    def _init_state(self):
        t = self.t
        for attempt in range(self.cfg.max_init_tries):
            jitter = 0.0 if attempt == 0 else 0.1 * min(attempt, 10)
            p0 = t.pooled if t.pooled is not None else 0.5
            self.beta0 = float(special.logit(p0)) + jitter * self.rng.standard_normal()
            self.v = jitter * self.rng.standard_normal(t.n)
            self.u = np.zeros(t.n)
            self.z = np.zeros(t.n_rec)
            self.lt = math.log(t.priors.tau_median())
            self.lphi = 0.0
            self.ls = math.log(t.priors.cluster_median()) if t.has_e else -math.inf
            self._refresh()
            if math.isfinite(self.logpost()):
                return
        raise InitializationError("log posterior is not finite at any initial value tried")

    @property
    def tau(self):
        return math.exp(self.lt)

    @property
    def phi(self):
        return float(special.expit(self.lphi))

    @property
    def s2(self):
        return math.exp(self.ls) if self.t.has_e else 0.0

    def _coef(self):
        rt = 1.0 / math.sqrt(self.tau)
        return rt * math.sqrt(1.0 - self.phi), rt * math.sqrt(self.phi)

    def _compose(self, v, u, lt, lphi):
        phi = special.expit(lphi)
        return (math.sqrt(1.0 - phi) * v + math.sqrt(phi) * u) / math.sqrt(math.exp(lt))

    def _refresh(self):
        t = self.t
        self.b = self._compose(self.v, self.u, self.lt, self.lphi)
        self.eta_a = self.beta0 + self.b
        self.eta_r = self.eta_a[t.area] + (math.sqrt(self.s2) * self.z if t.has_e else 0.0)
        self.ll_r = t.rec_ll(self.eta_r)
        self.ll = float(self.ll_r.sum())
        self.bll = t.bench_ll(self.eta_a, self.s2)

    def logpost(self):
        """Log target on the sampler's coordinates (constants dropped)."""
        t = self.t
        lp = self.ll + self.bll + t.lp_beta0(self.beta0) - 0.5 * float(self.v @ self.v)
        lp += -0.5 * float(self.u @ t.struct.q_scaled @ self.u)
        lp += t.lp_tau(self.lt) + t.lp_phi(self.lphi)
        if t.has_e:
            lp += -0.5 * float(self.z @ self.z) + t.lp_s2(self.ls)
        return lp

    def _eval(self, eta_a, s2):
        t = self.t
        eta_r = eta_a[t.area]
        if t.has_e:
            eta_r = eta_r + math.sqrt(s2) * self.z
        ll_r = t.rec_ll(eta_r)
        return eta_r, ll_r, float(ll_r.sum()), t.bench_ll(eta_a, s2)

    def _accept(self, logr):
        return math.log(self.rng.random()) < logr

    def _factor(self, cov):
        evals, evecs = np.linalg.eigh(cov)
        keep = evals > 1e-12 * max(evals.max(), 1e-300)
        return evecs[:, keep] * np.sqrt(evals[keep])

    def _u_step(self, scale):
        eps = self.rng.standard_normal(self.u_factor.shape[1])
        d = self.u_factor @ eps * scale
        return d - d.mean()

    # -- moves -------------------------------------------------------------
    def _move_z(self):
        t = self.t
        sig = math.sqrt(self.s2)
        s = self.vec_scale["z"]
        z_new = self.z + s * self.rng.standard_normal(t.n_rec)
        eta_new = self.eta_r + sig * (z_new - self.z)
        ll_new = t.rec_ll(eta_new)
        logr = ll_new - self.ll_r - 0.5 * (z_new * z_new - self.z * self.z)
        acc = np.log(self.rng.random(t.n_rec)) < logr
        self.z = np.where(acc, z_new, self.z)
        self.eta_r = np.where(acc, eta_new, self.eta_r)
        self.ll_r = np.where(acc, ll_new, self.ll_r)
        self.ll = float(self.ll_r.sum())
        return acc

    def _move_v(self):
        if self.t.bench is not None:
            return self._move_v_sequential()
        t = self.t
        n = t.n
        cv, _ = self._coef()
        dv = self.vec_scale["v"] * self.rng.standard_normal(n)
        v_new = self.v + dv
        db = cv * dv
        eta_new = self.eta_r + db[t.area]
        ll_new = t.rec_ll(eta_new)
        la_new = np.bincount(t.area, weights=ll_new, minlength=n)
        la_old = np.bincount(t.area, weights=self.ll_r, minlength=n)
        logr = la_new - la_old - 0.5 * (v_new * v_new - self.v * self.v)
        acc = np.log(self.rng.random(n)) < logr
        self.v = np.where(acc, v_new, self.v)
        self.b = self.b + np.where(acc, db, 0.0)
        self.eta_a = self.beta0 + self.b
        rec_acc = acc[t.area]
        self.eta_r = np.where(rec_acc, eta_new, self.eta_r)
        self.ll_r = np.where(rec_acc, ll_new, self.ll_r)
        self.ll = float(self.ll_r.sum())
        return acc

    def _move_v_sequential(self):
        t = self.t
        n = t.n
        cv, _ = self._coef()
        s2 = self.s2
        w = t.bench.weights
        theta = t.bench_theta(self.eta_a, s2)
        agg = float(theta @ w)
        acc = np.zeros(n, dtype=bool)
        eps = self.rng.standard_normal(n)
        logu = np.log(self.rng.random(n))
        scale = (
            1.0 / math.sqrt(1.0 + H_MARGINAL**2 * s2)
            if t.model == "unit" and t.theta_mode == "marginal"
            else 1.0
        )
        for i in range(n):
            dv = self.vec_scale["v"][i] * eps[i]
            db = cv * dv
            sl = slice(t.starts[i], t.starts[i + 1])
            eta_new = self.eta_r[sl] + db
            ll_new = t.rec_ll(eta_new, sl)
            theta_i = float(special.expit((self.eta_a[i] + db) * scale))
            agg_new = agg + w[i] * (theta_i - theta[i])
            bll_new = -0.5 * (agg_new - t.bench.y2) ** 2 / t.bench.sigma2_y2
            v_new = self.v[i] + dv
            logr = (
                float(ll_new.sum() - self.ll_r[sl].sum())
                + bll_new
                - self.bll
                - 0.5 * (v_new * v_new - self.v[i] ** 2)
            )
            if logu[i] < logr:
                acc[i] = True
                self.v[i] = v_new
                self.b[i] += db
                self.eta_a[i] += db
                self.eta_r[sl] = eta_new
                self.ll_r[sl] = ll_new
                theta[i] = theta_i
                agg = agg_new
                self.bll = bll_new
        self.ll = float(self.ll_r.sum())
        return acc

    def _global_update(self, beta0, b, lt, lphi, ls, extra_prior):
        """Propose new (beta0, b, hypers) that change the likelihood; accept or not."""
        t = self.t
        s2 = math.exp(ls) if t.has_e else 0.0
        eta_a = beta0 + b
        eta_r, ll_r, ll, bll = self._eval(eta_a, s2)
        logr = ll - self.ll + bll - self.bll + extra_prior
        if self._accept(logr):
            self.beta0, self.b, self.eta_a = beta0, b, eta_a
            self.lt, self.lphi, self.ls = lt, lphi, ls
            self.eta_r, self.ll_r, self.ll, self.bll = eta_r, ll_r, ll, bll
            return True
        return False

    def _move_u(self):
        t = self.t
        d = self._u_step(self.scale["u"])
        u_new = self.u + d
        _, cu = self._coef()
        b = self.b + cu * d
        q = t.struct.q_scaled
        dprior = -0.5 * (float(u_new @ q @ u_new) - float(self.u @ q @ self.u))
        ok = self._global_update(self.beta0, b, self.lt, self.lphi, self.ls, dprior)
        if ok:
            self.u = u_new
        return ok

    def _move_u_fixed_b(self):
        t = self.t
        d = self._u_step(self.scale["u_fixed_b"])
        u_new = self.u + d
        phi = self.phi
        v_new = self.v - math.sqrt(phi / (1.0 - phi)) * d
        q = t.struct.q_scaled
        logr = -0.5 * (float(u_new @ q @ u_new) - float(self.u @ q @ self.u))
        logr += -0.5 * (float(v_new @ v_new) - float(self.v @ self.v))
        if self._accept(logr):
            self.u, self.v = u_new, v_new
            return True
        return False

    def _move_beta0(self):
        b0 = self.beta0 + self.scale["beta0"] * self.rng.standard_normal()
        dprior = self.t.lp_beta0(b0) - self.t.lp_beta0(self.beta0)
        return self._global_update(b0, self.b, self.lt, self.lphi, self.ls, dprior)

    def _move_beta0_ridge(self):
        t = self.t
        delta = self.scale["beta0_ridge"] * self.rng.standard_normal()
        b0 = self.beta0 + delta
        cv, _ = self._coef()
        v_new = self.v - delta / cv
        logr = t.lp_beta0(b0) - t.lp_beta0(self.beta0)
        logr += -0.5 * (float(v_new @ v_new) - float(self.v @ self.v))
        if self._accept(logr):
            # eta is unchanged by construction; recompose b to avoid drift
            self.beta0, self.v = b0, v_new
            self.b = self.eta_a - b0
            return True
        return False

    def _move_tau(self):
        lt = self.lt + self.scale["tau"] * self.rng.standard_normal()
        b = self.b * math.exp(0.5 * (self.lt - lt))
        dprior = self.t.lp_tau(lt) - self.t.lp_tau(self.lt)
        return self._global_update(self.beta0, b, lt, self.lphi, self.ls, dprior)

    def _move_tau_fixed_b(self):
        t = self.t
        lt = self.lt + self.scale["tau_fixed_b"] * self.rng.standard_normal()
        f = math.exp(0.5 * (lt - self.lt))
        v_new, u_new = self.v * f, self.u * f
        q = t.struct.q_scaled
        dim = t.n + t.struct.rank
        logr = t.lp_tau(lt) - t.lp_tau(self.lt)
        logr += -0.5 * (float(v_new @ v_new) - float(self.v @ self.v))
        logr += -0.5 * (float(u_new @ q @ u_new) - float(self.u @ q @ self.u))
        logr += dim * math.log(f)
        if self._accept(logr):
            self.lt, self.v, self.u = lt, v_new, u_new
            return True
        return False

    def _move_phi(self):
        lphi = self.lphi + self.scale["phi"] * self.rng.standard_normal()
        b = self._compose(self.v, self.u, self.lt, lphi)
        dprior = self.t.lp_phi(lphi) - self.t.lp_phi(self.lphi)
        return self._global_update(self.beta0, b, self.lt, lphi, self.ls, dprior)

    def _move_phi_fixed_b(self):
        t = self.t
        lphi = self.lphi + self.scale["phi_fixed_b"] * self.rng.standard_normal()
        phi0, phi1 = self.phi, float(special.expit(lphi))
        v_new = (math.sqrt(1.0 - phi0) * self.v + (math.sqrt(phi0) - math.sqrt(phi1)) * self.u)
        v_new = v_new / math.sqrt(1.0 - phi1)
        # log(1 - phi) = -log(1 + e^{lphi})
        log_jac = 0.5 * t.n * (np.logaddexp(0.0, lphi) - np.logaddexp(0.0, self.lphi))
        logr = t.lp_phi(lphi) - t.lp_phi(self.lphi) + float(log_jac)
        logr += -0.5 * (float(v_new @ v_new) - float(self.v @ self.v))
        if self._accept(logr):
            self.lphi, self.v = lphi, v_new
            return True
        return False

    def _move_sigma(self):
        ls = self.ls + self.scale["sigma"] * self.rng.standard_normal()
        dprior = self.t.lp_s2(ls) - self.t.lp_s2(self.ls)
        return self._global_update(self.beta0, self.b, self.lt, self.lphi, ls, dprior)

    def _move_sigma_fixed_e(self):
        t = self.t
        ls = self.ls + self.scale["sigma_fixed_e"] * self.rng.standard_normal()
        f = math.exp(0.5 * (self.ls - ls))  # sigma_old / sigma_new
        z_new = self.z * f
        bll = t.bench_ll(self.eta_a, math.exp(ls))
        logr = t.lp_s2(ls) - t.lp_s2(self.ls) + bll - self.bll
        logr += -0.5 * (float(z_new @ z_new) - float(self.z @ self.z))
        logr += t.n_rec * math.log(f)
        if self._accept(logr):
            self.ls, self.z, self.bll = ls, z_new, bll
            return True
        return False

    # -- driver ------------------------------------------------------------
    def iterate(self):
        cfg = self.cfg
        if cfg.scan == "random":
            order = [self.moves[self.rng.integers(len(self.moves))]]
        else:
            order = self.moves
        stats = self.warm_stats if self.adapting else self.stats
        if self.adapting:
            self.t_adapt += 1
            gamma = self.t_adapt**-0.6
        for m in order:
            res = getattr(self, "_move_" + m)()
            if isinstance(res, np.ndarray):
                stats[m][0] += int(res.sum())
                stats[m][1] += res.size
                if self.adapting:
                    s = self.vec_scale[m]
                    s *= np.exp(gamma * (res.astype(float) - cfg.target_accept))
            else:
                stats[m][0] += int(res)
                stats[m][1] += 1
                if self.adapting:
                    self.scale[m] *= math.exp(gamma * (float(res) - cfg.target_accept))
        if self.adapting and ("u" in self.moves or "u_fixed_b" in self.moves):
            self._track_u()

    def _track_u(self):
        if not self.adapting:
            return
        cfg = self.cfg
        start = int(cfg.adapt_start * cfg.n_warmup)
        if self.t_adapt <= start:
            return
        self._u_sum += self.u
        self._u_outer += np.outer(self.u, self.u)
        self._u_count += 1
        c = self._u_count
        if c >= 2 * self.t.n and c % cfg.adapt_every == 0:
            mean = self._u_sum / c
            cov = self._u_outer / c - np.outer(mean, mean)
            proj = np.eye(self.t.n) - 1.0 / self.t.n
            cov = proj @ cov @ proj
            ridge = 1e-6 * max(np.trace(cov) / self.t.struct.rank, 1e-12)
            self.u_factor = self._factor(cov + ridge * proj) * (2.38 / math.sqrt(self.t.struct.rank))

    def warmup(self):
        for _ in range(self.cfg.n_warmup):
            self.iterate()
        self.adapting = False
        self._resync()

    def _resync(self):
        # remove floating-point drift accumulated by incremental updates
        self.u = self.u - self.u.mean()
        self._refresh()

    def sample(self, n_draws: int):
        t = self.t
        n = t.n
        rec = {
            "beta0": np.empty(n_draws),
            "eta": np.empty((n_draws, n)),
            "tau_b": np.empty(n_draws),
            "phi": np.empty(n_draws),
            "sigma2_e": np.empty(n_draws),
        }
        for k in range(n_draws):
            for _ in range(self.cfg.thin):
                self.iterate()
            self.u = self.u - self.u.mean()
            self.b = self._compose(self.v, self.u, self.lt, self.lphi)
            rec["beta0"][k] = self.beta0
            rec["eta"][k] = self.beta0 + self.b
            rec["tau_b"][k] = self.tau
            rec["phi"][k] = self.phi
            rec["sigma2_e"][k] = self.s2
        self._resync()
        return rec

    def acceptance_rates(self, warmup: bool = False) -> dict:
        src = self.warm_stats if warmup else self.stats
        return {m: (a / p if p else float("nan")) for m, (a, p) in src.items()}

    def step_sizes(self) -> dict:
        out = dict(self.scale)
        out.update({k: v.copy() for k, v in self.vec_scale.items()})
        out["u_factor"] = self.u_factor.copy()
        return out


class MCMCRun:
    """Multi-chain run that can be extended after warmup.

    ``model`` is ``"unit"`` (data: ``ClusterDataset`` or ``None`` for a
    prior-only run) or ``"fh"`` (data: ``DirectEstimates`` or a
    ``ClusterDataset`` to be reduced to direct estimates). A benchmark
    turns the run into the joint benchmarked sampler.
    """

    def __init__(
        self,
        model: str,
        data,
        graph: AreaGraph | Bym2Structure,
        priors: Priors | None = None,
        cfg: SamplerConfig | None = None,
        bench: Benchmark | None = None,
        theta_mode: str = "marginal",
    ):
        self.cfg = cfg or SamplerConfig()
        self.target = _Target(model, data, graph, priors or Priors(), bench, theta_mode)
        self.chains = [_Chain(self.target, self.cfg, c) for c in range(self.cfg.n_chains)]
        self._parts: list[DrawMatrix] = []
        self._counts = [0] * self.cfg.n_chains
        self.warmed = False

    @property
    def model(self) -> str:
        return self.target.model

    def warmup(self):
        for ch in self.chains:
            ch.warmup()
            log.debug("chain %d warmup acceptance %s", ch.index, ch.acceptance_rates(True))
        self.warmed = True

    def extend(self, n_draws: int) -> DrawMatrix:
        """Run each chain ``n_draws`` more recorded iterations; return the new rows."""
        if not self.warmed:
            self.warmup()
        parts = []
        for ch in self.chains:
            rec = ch.sample(n_draws)
            parts.append(self._to_draws(rec, ch.index, self._counts[ch.index]))
            self._counts[ch.index] += n_draws
        new = DrawMatrix.concat(parts)
        self._parts.append(new)
        log.info("collected %d draws per chain", self._counts[0])
        return new

    def run(self) -> DrawMatrix:
        self.extend(self.cfg.n_draws)
        return self.draws

    @property
    def draws(self) -> DrawMatrix:
        if not self._parts:
            raise RuntimeError("no draws collected yet")
        if len(self._parts) > 1:
            self._parts = [DrawMatrix.concat(self._parts)]
        return self._parts[0]

    def _to_draws(self, rec, chain, offset) -> DrawMatrix:
        k = rec["beta0"].size
        if self.model == "unit":
            theta = marginal_prevalence(rec["eta"], rec["sigma2_e"])
            hypers = {"tau_b": rec["tau_b"], "phi": rec["phi"], "sigma2_e": rec["sigma2_e"]}
            link = "unit"
        else:
            theta = special.expit(rec["eta"])
            hypers = {"tau_b": rec["tau_b"], "phi": rec["phi"]}
            link = "fh"
        return DrawMatrix(
            theta=theta,
            eta=rec["eta"],
            beta0=rec["beta0"],
            hypers=hypers,
            chain_ids=np.full(k, chain),
            link=link,
            seed=self.cfg.seed,
            draw_index=np.arange(offset, offset + k),
        )

    def acceptance_rates(self) -> list[dict]:
        return [ch.acceptance_rates() for ch in self.chains]


def fit_unbenchmarked(model, data, graph, priors=None, cfg=None) -> DrawMatrix:
    return MCMCRun(model, data, graph, priors, cfg).run()


def fit_joint_oracle(model, data, graph, priors, bench, cfg=None, theta_mode="marginal"):
    """Sample the benchmarked posterior directly (benchmark likelihood inside the model)."""
    return MCMCRun(model, data, graph, priors, cfg, bench=bench, theta_mode=theta_mode).run()
