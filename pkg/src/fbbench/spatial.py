"""Area graphs and BYM2 random-effect machinery."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import sparse, special
from scipy.sparse import csgraph

__all__ = [
    "SA_PROVINCES",
    "AreaGraph",
    "Bym2Params",
    "Bym2Structure",
    "bym2_logprior",
    "bym2_scaling_factor",
    "icar_precision",
    "pc_precision_logpdf",
    "pc_sd_logpdf",
    "project_sum_zero",
    "sa_province_graph",
]

_LOG_2PI = math.log(2.0 * math.pi)

# Row order of the bundled graph file.
SA_PROVINCES = (
    "Eastern Cape",
    "Free State",
    "Gauteng",
    "KwaZulu-Natal",
    "Limpopo",
    "Mpumalanga",
    "Northern Cape",
    "North West",
    "Western Cape",
)


@dataclass(frozen=True)
class AreaGraph:
    """Symmetric, loop-free, connected adjacency over ``n_areas`` areas."""

    n_areas: int
    neighbors: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        nb = tuple(tuple(sorted(set(int(j) for j in row))) for row in self.neighbors)
        object.__setattr__(self, "neighbors", nb)
        if self.n_areas < 1 or len(nb) != self.n_areas:
            raise ValueError("need one neighbour list per area")
        for i, row in enumerate(nb):
            for j in row:
                if not 0 <= j < self.n_areas:
                    raise ValueError(f"area {i} lists unknown neighbour {j}")
                if j == i:
                    raise ValueError(f"self-loop at area {i}")
                if i not in nb[j]:
                    raise ValueError(f"adjacency is not symmetric between {i} and {j}")
        if self.n_areas > 1:
            n_comp, _ = csgraph.connected_components(self.adjacency(), directed=False)
            if n_comp != 1:
                raise ValueError(f"graph has {n_comp} components; islands are not supported")

    @classmethod
    def from_edges(cls, n_areas: int, edges: Iterable[tuple[int, int]]) -> "AreaGraph":
        rows: list[set[int]] = [set() for _ in range(n_areas)]
        for i, j in edges:
            rows[i].add(j)
            rows[j].add(i)
        return cls(n_areas, tuple(tuple(r) for r in rows))

    @classmethod
    def from_file(cls, path) -> "AreaGraph":
        return cls.from_text(Path(path).read_text())

    @classmethod
    def from_text(cls, text: str) -> "AreaGraph":
        """Parse line ``i`` as the 1-based neighbour ids of area ``i``."""
        lines = text.splitlines()
        while lines and not lines[-1].strip():
            lines.pop()
        rows = []
        for line in lines:
            tokens = line.replace(",", " ").split()
            ids = [int(t) - 1 for t in tokens]
            if any(j < 0 for j in ids):
                raise ValueError("neighbour ids are 1-based")
            rows.append(tuple(ids))
        return cls(len(rows), tuple(rows))

    def to_text(self) -> str:
        return "".join(" ".join(str(j + 1) for j in row) + "\n" for row in self.neighbors)

    @property
    def degrees(self) -> np.ndarray:
        return np.array([len(r) for r in self.neighbors], dtype=np.int64)

    def adjacency(self) -> sparse.csr_matrix:
        rows = np.repeat(np.arange(self.n_areas), self.degrees)
        cols = np.fromiter((j for r in self.neighbors for j in r), dtype=np.int64)
        data = np.ones(rows.size, dtype=np.int64)
        return sparse.csr_matrix((data, (rows, cols)), shape=(self.n_areas, self.n_areas))


def sa_province_graph() -> AreaGraph:
    """The bundled nine-province adjacency (order as in ``SA_PROVINCES``)."""
    text = resources.files("fbbench").joinpath("data/sa_provinces.graph").read_text()
    return AreaGraph.from_text(text)


def icar_precision(graph: AreaGraph) -> sparse.csr_matrix:
    """Besag precision ``D - A`` as a float sparse matrix (built in integers)."""
    adj = graph.adjacency()
    q = sparse.diags(graph.degrees) - adj
    return sparse.csr_matrix(q.astype(np.int64), dtype=float)


def bym2_scaling_factor(graph: AreaGraph) -> float:
    """Geometric mean of the marginal variances of the sum-to-zero ICAR.

    Uses the identity ``pinv(Q) = inv(Q + J/n) - J/n`` for a connected
    graph, ``J`` the all-ones matrix. A single area has no structured
    component and returns 1.
    """
    n = graph.n_areas
    if n == 1:
        return 1.0
    q = icar_precision(graph).toarray()
    j = np.full((n, n), 1.0 / n)
    ginv = np.linalg.inv(q + j) - j
    diag = np.diag(ginv)
    if np.any(diag <= 0.0):
        raise ValueError("constrained generalized inverse is not positive on the diagonal")
    return float(np.exp(np.mean(np.log(diag))))


def project_sum_zero(u):
    u = np.asarray(u, dtype=float)
    return u - u.mean(axis=-1, keepdims=True)


class Bym2Structure:
    """Cached per-graph quantities: scaled precision, its spectrum and covariance.

    The structured field ``u`` is kept on the scaled scale: precision
    ``kappa * Q``, whose generalized inverse has unit geometric-mean variance.
    """

    def __init__(self, graph: AreaGraph):
        self.graph = graph
        self.n = graph.n_areas
        self.kappa = bym2_scaling_factor(graph)
        q = icar_precision(graph).toarray()
        self.q_scaled = self.kappa * q
        self.q_scaled.flags.writeable = False
        if self.n > 1:
            evals, evecs = np.linalg.eigh(self.q_scaled)
            keep = evals > 1e-9 * evals.max()
            if keep.sum() != self.n - 1:
                raise ValueError("scaled ICAR precision must have rank n - 1")
            self.eigvals = evals[keep]
            self.eigvecs = evecs[:, keep]
        else:
            self.eigvals = np.empty(0)
            self.eigvecs = np.empty((1, 0))
        self.rank = self.n - 1
        self.log_det_plus = float(np.sum(np.log(self.eigvals)))
        # log normalizer of the improper density on the zero-sum subspace
        self.log_norm = 0.5 * self.log_det_plus - 0.5 * self.rank * _LOG_2PI
        self.covariance = (self.eigvecs / self.eigvals) @ self.eigvecs.T

    @classmethod
    @functools.lru_cache(maxsize=64)
    def for_graph(cls, graph: AreaGraph) -> "Bym2Structure":
        return cls(graph)

    def icar_logpdf(self, u) -> float:
        u = np.asarray(u, dtype=float)
        return self.log_norm - 0.5 * float(u @ self.q_scaled @ u)

    def sample_icar(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        shape = (self.rank,) if size is None else (size, self.rank)
        z = rng.standard_normal(shape)
        return (z / np.sqrt(self.eigvals)) @ self.eigvecs.T

    def sample_bym2(self, tau_b: float, phi: float, rng: np.random.Generator, size: int):
        """Draw ``size`` composed effects ``b`` from the BYM2 prior."""
        u = self.sample_icar(rng, size)
        v = rng.standard_normal((size, self.n))
        return (math.sqrt(1.0 - phi) * v + math.sqrt(phi) * u) / math.sqrt(tau_b)


@dataclass(frozen=True)
class Bym2Params:
    """BYM2 state; ``u`` is the zero-sum field on the scaled ICAR."""

    tau_b: float
    phi: float
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        v = np.asarray(self.v, dtype=float)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)
        if u.shape != v.shape or u.ndim != 1:
            raise ValueError("u and v must be vectors of the same length")
        if abs(u.sum()) > 1e-10:
            raise ValueError("structured component must sum to zero")

    def compose(self) -> np.ndarray:
        return (math.sqrt(1.0 - self.phi) * self.v + math.sqrt(self.phi) * self.u) / math.sqrt(
            self.tau_b
        )


def pc_precision_logpdf(tau, U: float = 1.0, alpha: float = 0.01):
    """PC prior on a precision calibrated by ``P(1/sqrt(tau) > U) = alpha``.

    ``lambda = -ln(alpha) / U`` and ``pi(tau) = lambda/2 tau^{-3/2} exp(-lambda tau^{-1/2})``.
    """
    lam = -math.log(alpha) / U
    tau = np.asarray(tau, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = math.log(lam / 2.0) - 1.5 * np.log(tau) - lam / np.sqrt(tau)
    out = np.where(tau > 0.0, out, -np.inf)
    return float(out) if out.ndim == 0 else out


def pc_sd_logpdf(sigma, U: float = 1.0, alpha: float = 0.01):
    """Exponential PC prior on a standard deviation, ``P(sigma > U) = alpha``."""
    lam = -math.log(alpha) / U
    sigma = np.asarray(sigma, dtype=float)
    out = np.where(sigma > 0.0, math.log(lam) - lam * sigma, -np.inf)
    return float(out) if out.ndim == 0 else out


def beta_logpdf(x: float, a: float, b: float) -> float:
    if not 0.0 <= x <= 1.0:
        return -math.inf
    with np.errstate(divide="ignore"):
        return float(
            special.xlogy(a - 1.0, x) + special.xlog1py(b - 1.0, -x) - special.betaln(a, b)
        )


def bym2_logprior(
    params: Bym2Params,
    graph: AreaGraph | Bym2Structure,
    pc_U: float = 1.0,
    pc_alpha: float = 0.01,
    beta_a: float = 0.5,
    beta_b: float = 0.5,
) -> float:
    """Scaled ICAR on ``u`` + N(0, 1) on ``v`` + PC prior on ``tau_b`` + Beta on ``phi``."""
    if not params.tau_b > 0.0 or not 0.0 <= params.phi <= 1.0:
        return -math.inf
    struct = graph if isinstance(graph, Bym2Structure) else Bym2Structure.for_graph(graph)
    v = params.v
    lp = -0.5 * float(v @ v) - 0.5 * v.size * _LOG_2PI
    if struct.n > 1:
        lp += struct.icar_logpdf(params.u)
    lp += pc_precision_logpdf(params.tau_b, pc_U, pc_alpha)
    lp += beta_logpdf(params.phi, beta_a, beta_b)
    return lp
