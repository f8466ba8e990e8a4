"""Shared domain types, links, direct estimation and the benchmark kernel."""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import special

__all__ = [
    "H_MARGINAL",
    "Benchmark",
    "BenchmarkResult",
    "ClusterDataset",
    "DirectEstimates",
    "DrawMatrix",
    "Method",
    "benchmark_loglik",
    "direct_estimates",
    "expit",
    "logit",
    "marginal_prevalence",
    "read_draws",
    "write_draws",
]

#: Logistic-normal marginalization constant 16*sqrt(3)/(15*pi).
H_MARGINAL = 16.0 * math.sqrt(3.0) / (15.0 * math.pi)

_LOG_2PI = math.log(2.0 * math.pi)


def logit(p):
    """Log-odds of ``p``; raises ``ValueError`` outside the open unit interval."""
    arr = np.asarray(p, dtype=float)
    if not np.all((arr > 0.0) & (arr < 1.0)):
        raise ValueError("logit is only defined on (0, 1)")
    out = special.logit(arr)
    return float(out) if out.ndim == 0 else out


def expit(x):
    """Inverse logit, evaluated in the overflow-safe branch form."""
    out = special.expit(np.asarray(x, dtype=float))
    return float(out) if out.ndim == 0 else out


def marginal_prevalence(eta, sigma2_e):
    """Area prevalence after integrating out an iid logit-normal cluster effect.

    ``expit(eta / sqrt(1 + h^2 sigma2_e))`` with ``h = H_MARGINAL``; ``eta`` is
    the cluster-free linear predictor. Broadcasts ``sigma2_e`` over trailing
    area axes, so a (K,) vector of variances pairs with a (K, n) ``eta``.
    """
    eta = np.asarray(eta, dtype=float)
    s2 = np.asarray(sigma2_e, dtype=float)
    if s2.ndim == 1 and eta.ndim == 2:
        s2 = s2[:, None]
    return special.expit(eta / np.sqrt(1.0 + H_MARGINAL**2 * s2))


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Benchmark:
    """National estimate ``y2`` with variance ``sigma2_y2`` and area weights."""

    y2: float
    sigma2_y2: float
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).copy()
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        if not 0.0 < self.y2 < 1.0:
            raise ValueError(f"benchmark y2 must lie in (0, 1), got {self.y2}")
        if not self.sigma2_y2 > 0.0 or not math.isfinite(self.sigma2_y2):
            raise ValueError("benchmark variance must be strictly positive and finite")
        if w.ndim != 1 or w.size == 0:
            raise ValueError("weights must be a non-empty vector")
        if np.any(w < 0.0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")

    @classmethod
    def equal_weights(cls, y2: float, sigma2_y2: float, n_areas: int) -> "Benchmark":
        return cls(y2, sigma2_y2, np.full(n_areas, 1.0 / n_areas))

    @property
    def n_areas(self) -> int:
        return self.weights.size


@dataclass(frozen=True)
class ClusterDataset:
    """Cluster-level binomial counts; ``area_id`` is 0-based."""

    area_id: np.ndarray
    trials: np.ndarray
    successes: np.ndarray
    n_areas: int

    def __post_init__(self):
        area = np.asarray(self.area_id, dtype=np.int64)
        trials = np.asarray(self.trials, dtype=np.int64)
        succ = np.asarray(self.successes, dtype=np.int64)
        for name, arr in (("area_id", area), ("trials", trials), ("successes", succ)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if self.n_areas < 1:
            raise ValueError("n_areas must be positive")
        if area.ndim != 1 or area.size == 0:
            raise ValueError("a cluster dataset needs at least one record")
        if not (area.shape == trials.shape == succ.shape):
            raise ValueError("area_id, trials and successes must have equal length")
        if np.any(area < 0) or np.any(area >= self.n_areas):
            raise ValueError("area_id out of range")
        if np.any(trials < 1):
            raise ValueError("trials must be positive integers")
        if np.any(succ < 0) or np.any(succ > trials):
            raise ValueError("successes must lie in [0, trials]")

    @property
    def n_clusters(self) -> int:
        return self.area_id.size

    def pooled_prevalence(self) -> float:
        return float(self.successes.sum() / self.trials.sum())

    def sorted_by_area(self) -> "ClusterDataset":
        order = np.argsort(self.area_id, kind="stable")
        return ClusterDataset(
            self.area_id[order], self.trials[order], self.successes[order], self.n_areas
        )


@dataclass(frozen=True)
class DirectEstimates:
    """Weighted (Hajek-type) area estimates and logit-scale design variances.

    Areas whose estimate is 0, 1 or undefined, or whose variance cannot be
    estimated, carry ``present == False`` and NaN entries.
    """

    theta_hat: np.ndarray
    logit_variance: np.ndarray
    present: np.ndarray
    variance: np.ndarray
    design_weights: np.ndarray | None = None

    @property
    def n_areas(self) -> int:
        return self.theta_hat.size

    @property
    def logit_theta_hat(self) -> np.ndarray:
        out = np.full(self.n_areas, np.nan)
        out[self.present] = special.logit(self.theta_hat[self.present])
        return out


def direct_estimates(data: ClusterDataset, design_weights=None) -> DirectEstimates:
    """Weighted ratio estimates with a with-replacement cluster variance.

    For area ``i`` with clusters ``r``: ``theta = sum(w y) / sum(w n)``. The
    variance of the ratio is linearized, ``V* = m/(m-1) * sum(z_r^2)`` with
    ``z_r = w_r (y_r - theta n_r) / sum(w n)``, and moved to the logit scale
    by the delta method, ``V* / (theta (1 - theta))^2``.
    """
    n = data.n_areas
    w = np.ones(data.n_clusters) if design_weights is None else np.asarray(design_weights, float)
    if w.shape != (data.n_clusters,) or np.any(w <= 0.0):
        raise ValueError("design weights must be positive, one per record")
    y = data.successes.astype(float)
    m_tr = data.trials.astype(float)

    wy = np.bincount(data.area_id, weights=w * y, minlength=n)
    wn = np.bincount(data.area_id, weights=w * m_tr, minlength=n)
    counts = np.bincount(data.area_id, minlength=n)

    theta = np.full(n, np.nan)
    has = wn > 0
    theta[has] = wy[has] / wn[has]

    theta_r = theta[data.area_id]
    z = w * (y - theta_r * m_tr) / wn[data.area_id]
    ss = np.bincount(data.area_id, weights=z * z, minlength=n)
    var = np.full(n, np.nan)
    multi = counts >= 2
    var[multi] = counts[multi] / (counts[multi] - 1.0) * ss[multi]

    interior = has & (theta > 0.0) & (theta < 1.0)
    present = interior & multi & (var > 0.0)
    lvar = np.full(n, np.nan)
    lvar[present] = var[present] / (theta[present] * (1.0 - theta[present])) ** 2
    theta_out = np.where(interior, theta, np.nan)
    return DirectEstimates(
        theta_hat=theta_out,
        logit_variance=lvar,
        present=present,
        variance=var,
        design_weights=None if design_weights is None else w.copy(),
    )


def benchmark_loglik(theta, bench: Benchmark):
    """Normal log density of ``y2`` at mean ``sum(w * theta)``.

    Accepts a single row (n,) or a stack of rows (K, n); returns a float or a
    (K,) array accordingly.
    """
    theta = np.asarray(theta, dtype=float)
    agg = theta @ bench.weights
    dev = agg - bench.y2
    out = -0.5 * dev * dev / bench.sigma2_y2 - 0.5 * (_LOG_2PI + math.log(bench.sigma2_y2))
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Draw containers
# ---------------------------------------------------------------------------

LINKS = ("unit", "fh", "derived")


@dataclass
class DrawMatrix:
    """K x n area prevalence draws with the aligned model internals.

    ``link`` records how ``theta`` follows from the internals: ``"unit"``
    uses the marginalized prevalence, ``"fh"`` plain ``expit(eta)``, and
    ``"derived"`` marks post-processed draws (raked or projected) whose
    internals are the source rows kept for audit.
    """

    theta: np.ndarray
    eta: np.ndarray
    beta0: np.ndarray
    hypers: dict[str, np.ndarray]
    chain_ids: np.ndarray
    link: str = "unit"
    seed: int | None = None
    draw_index: np.ndarray | None = None

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.eta = np.asarray(self.eta, dtype=float)
        self.beta0 = np.asarray(self.beta0, dtype=float)
        self.chain_ids = np.asarray(self.chain_ids, dtype=np.int64)
        self.hypers = {k: np.asarray(v, dtype=float) for k, v in self.hypers.items()}
        if self.link not in LINKS:
            raise ValueError(f"unknown link {self.link!r}")
        k, n = self.theta.shape
        if self.eta.shape != (k, n) or self.beta0.shape != (k,) or self.chain_ids.shape != (k,):
            raise ValueError("draw internals are not aligned with theta")
        for name, v in self.hypers.items():
            if v.shape != (k,):
                raise ValueError(f"hyperparameter {name!r} is not aligned with theta")
        if k == 0:
            raise ValueError("a draw matrix needs at least one row")
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("theta draws must be finite")
        # model draws may saturate to exactly 0 or 1 in floating point
        if self.link != "derived" and not np.all((self.theta >= 0.0) & (self.theta <= 1.0)):
            raise ValueError("theta draws must lie in [0, 1]")
        if np.any(np.diff(self.chain_ids) < 0):
            raise ValueError("rows must be grouped into contiguous chains")
        if self.draw_index is None:
            self.draw_index = _within_chain_index(self.chain_ids)
        else:
            self.draw_index = np.asarray(self.draw_index, dtype=np.int64)

    @property
    def n_draws(self) -> int:
        return self.theta.shape[0]

    @property
    def n_areas(self) -> int:
        return self.theta.shape[1]

    @property
    def chains(self) -> np.ndarray:
        return np.unique(self.chain_ids)

    @property
    def n_chains(self) -> int:
        return int(self.chains.size)

    def aggregate(self, weights) -> np.ndarray:
        return self.theta @ np.asarray(weights, dtype=float)

    def recompute_theta(self) -> np.ndarray:
        if self.link == "unit":
            return marginal_prevalence(self.eta, self.hypers["sigma2_e"])
        if self.link == "fh":
            return special.expit(self.eta)
        raise ValueError("derived draws have no generating map")

    def is_consistent(self, tol: float = 1e-12) -> bool:
        if self.link == "derived":
            return True
        return bool(np.max(np.abs(self.recompute_theta() - self.theta)) <= tol)

    def take(self, rows) -> "DrawMatrix":
        rows = np.asarray(rows)
        return DrawMatrix(
            theta=self.theta[rows],
            eta=self.eta[rows],
            beta0=self.beta0[rows],
            hypers={k: v[rows] for k, v in self.hypers.items()},
            chain_ids=self.chain_ids[rows],
            link=self.link,
            seed=self.seed,
            draw_index=self.draw_index[rows],
        )

    def with_theta(self, theta) -> "DrawMatrix":
        return DrawMatrix(
            theta=theta,
            eta=self.eta.copy(),
            beta0=self.beta0.copy(),
            hypers={k: v.copy() for k, v in self.hypers.items()},
            chain_ids=self.chain_ids.copy(),
            link="derived",
            seed=self.seed,
            draw_index=self.draw_index.copy(),
        )

    def chain_array(self, values) -> np.ndarray:
        """Reshape a per-row quantity to (chains, draws), truncating to the shortest chain."""
        values = np.asarray(values, dtype=float)
        groups = [values[self.chain_ids == c] for c in self.chains]
        m = min(g.size for g in groups)
        return np.stack([g[:m] for g in groups])

    @staticmethod
    def concat(parts: Sequence["DrawMatrix"]) -> "DrawMatrix":
        """Stack draw matrices and regroup rows chain by chain."""
        first = parts[0]
        theta = np.concatenate([p.theta for p in parts])
        chain_ids = np.concatenate([p.chain_ids for p in parts])
        draw_index = np.concatenate([p.draw_index for p in parts])
        order = np.lexsort((draw_index, chain_ids))
        return DrawMatrix(
            theta=theta[order],
            eta=np.concatenate([p.eta for p in parts])[order],
            beta0=np.concatenate([p.beta0 for p in parts])[order],
            hypers={k: np.concatenate([p.hypers[k] for p in parts])[order] for k in first.hypers},
            chain_ids=chain_ids[order],
            link=first.link,
            seed=first.seed,
            draw_index=draw_index[order],
        )


def _within_chain_index(chain_ids: np.ndarray) -> np.ndarray:
    out = np.empty(chain_ids.size, dtype=np.int64)
    if chain_ids.size == 0:
        return out
    starts = np.flatnonzero(np.r_[True, chain_ids[1:] != chain_ids[:-1]])
    lengths = np.diff(np.r_[starts, chain_ids.size])
    for s, ln in zip(starts, lengths):
        out[s : s + ln] = np.arange(ln)
    return out


class Method(str, enum.Enum):
    REJECTION = "rejection"
    METROPOLIS_HASTINGS = "mh"
    RAKING = "rake"
    BAYES_ESTIMATE_EXACT = "bayes_exact"
    BAYES_ESTIMATE_INEXACT = "bayes_inexact"
    JOINT_ORACLE = "joint"


_SAMPLING_METHODS = {Method.REJECTION, Method.METROPOLIS_HASTINGS}


@dataclass
class BenchmarkResult:
    """Output of any benchmarking method.

    ``estimates`` holds point estimates for methods without draws (inexact
    Bayes estimate); otherwise medians and means come from ``draws``.
    """

    method: Method
    draws: DrawMatrix | None = None
    acceptance_rate: float | None = None
    diagnostics: object | None = None
    estimates: np.ndarray | None = None
    warnings: list[str] = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.method = Method(self.method)
        has_rate = self.acceptance_rate is not None
        if has_rate != (self.method in _SAMPLING_METHODS):
            raise ValueError("acceptance_rate is reported exactly for rejection and MH")
        if has_rate and not 0.0 <= self.acceptance_rate <= 1.0:
            raise ValueError("acceptance_rate must lie in [0, 1]")
        if self.draws is None and self.estimates is None:
            raise ValueError("a result needs draws or point estimates")

    @property
    def median(self) -> np.ndarray:
        if self.draws is None:
            return np.asarray(self.estimates, dtype=float)
        return np.median(self.draws.theta, axis=0)

    @property
    def mean(self) -> np.ndarray:
        if self.draws is None:
            return np.asarray(self.estimates, dtype=float)
        return self.draws.theta.mean(axis=0)

    def interval(self, alpha: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
        """Equal-tailed ``1 - alpha`` credible interval per area."""
        if self.draws is None:
            raise ValueError(f"{self.method.value} produces no draws to form intervals")
        lo, hi = np.quantile(self.draws.theta, [alpha / 2.0, 1.0 - alpha / 2.0], axis=0)
        return lo, hi

    def to_dict(self) -> dict:
        out = {
            "method": self.method.value,
            "acceptance_rate": self.acceptance_rate,
            "n_draws": None if self.draws is None else self.draws.n_draws,
            "median": self.median.tolist(),
            "mean": self.mean.tolist(),
            "warnings": list(self.warnings),
            "info": _jsonable(self.info),
        }
        if self.draws is not None:
            lo, hi = self.interval()
            out["interval_95"] = {"lower": lo.tolist(), "upper": hi.tolist()}
        if self.diagnostics is not None:
            out["diagnostics"] = self.diagnostics.to_dict()
        return out


def _jsonable(obj):
    if isinstance(obj, Mapping):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# ---------------------------------------------------------------------------
# DrawMatrix files
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_draws(draws: DrawMatrix, path) -> None:
    """Write long-format CSV ``chain,draw,area,theta,eta,beta0,<hypers>`` plus JSON sidecar."""
    path = Path(path)
    names = list(draws.hypers)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["chain", "draw", "area", "theta", "eta", "beta0", *names])
        for k in range(draws.n_draws):
            chain = int(draws.chain_ids[k])
            draw = int(draws.draw_index[k])
            b0 = _fmt(draws.beta0[k])
            hyp = [_fmt(draws.hypers[h][k]) for h in names]
            for i in range(draws.n_areas):
                writer.writerow(
                    [chain, draw, i, _fmt(draws.theta[k, i]), _fmt(draws.eta[k, i]), b0, *hyp]
                )
    meta = {
        "n_areas": draws.n_areas,
        "n_draws": draws.n_draws,
        "hyperparameters": names,
        "link": draws.link,
        "seed": draws.seed,
    }
    sidecar_path(path).write_text(json.dumps(meta, indent=2) + "\n")


def read_draws(path) -> DrawMatrix:
    path = Path(path)
    meta = json.loads(sidecar_path(path).read_text())
    n = int(meta["n_areas"])
    names = list(meta["hyperparameters"])
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        expected = ["chain", "draw", "area", "theta", "eta", "beta0", *names]
        if header != expected:
            raise ValueError(f"unexpected draw header {header}")
        rows = list(reader)
    if len(rows) % n:
        raise ValueError("row count is not a multiple of n_areas")
    k = len(rows) // n
    theta = np.empty((k, n))
    eta = np.empty((k, n))
    beta0 = np.empty(k)
    chain = np.empty(k, dtype=np.int64)
    draw = np.empty(k, dtype=np.int64)
    hyp = {h: np.empty(k) for h in names}
    for j, row in enumerate(rows):
        r, i = divmod(j, n)
        if int(row[2]) != i:
            raise ValueError("areas must be listed in order within each draw")
        theta[r, i] = float(row[3])
        eta[r, i] = float(row[4])
        if i == 0:
            chain[r] = int(row[0])
            draw[r] = int(row[1])
            beta0[r] = float(row[5])
            for h, val in zip(names, row[6:]):
                hyp[h][r] = float(val)
    return DrawMatrix(
        theta=theta,
        eta=eta,
        beta0=beta0,
        hypers=hyp,
        chain_ids=chain,
        link=meta["link"],
        seed=meta.get("seed"),
        draw_index=draw,
    )
