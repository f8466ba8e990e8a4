"""Simulation grid, timing protocol and report tables.

A cell is one combination of clusters per area, benchmark value and
benchmark variance. Datasets depend only on (seed, clusters per area,
replicate), so cells that differ only in the benchmark share data and
unbenchmarked draws.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .benchmarkers import (
    MHBenchmarker,
    RejectionBenchmarker,
    bayes_benchmark,
    rake_benchmark,
)
from .core import Benchmark, BenchmarkResult, ClusterDataset, DrawMatrix
from .diagnostics import min_theta_ess
from .inference import MCMCRun, SamplerConfig
from .models import InterceptShiftPrior, Priors
from .spatial import AreaGraph, sa_province_graph

__all__ = [
    "METHODS",
    "Cell",
    "CellReport",
    "ReplicateReport",
    "RunConfig",
    "SimulationSpec",
    "emit_report",
    "read_dataset",
    "run_cell",
    "run_cells",
    "run_replicate",
    "simulate_dataset",
    "write_dataset",
]

log = logging.getLogger(__name__)

METHODS = ("joint_oracle", "rejection", "mh", "rake", "bayes_estimate")
FULLY_BAYES = ("joint_oracle", "rejection", "mh")


@dataclass(frozen=True)
class Cell:
    index: int
    clusters_per_area: int
    y2: float
    sigma2_y2: float

    @property
    def label(self) -> str:
        return f"c{self.clusters_per_area}_y{self.y2:g}_s{self.sigma2_y2:g}"


@dataclass(frozen=True)
class SimulationSpec:
    area_probs: tuple[float, ...] = tuple(round(0.28 + 0.01 * i, 2) for i in range(9))
    trials_per_cluster: int = 100
    clusters_per_area: tuple[int, ...] = (5, 10, 100, 1000)
    y2_values: tuple[float, ...] = (0.29, 0.30)
    sigma2_values: tuple[float, ...] = (0.01, 0.0001)
    replicates: int = 10
    seed: int = 20230901

    def __post_init__(self):
        if not all(0.0 < p < 1.0 for p in self.area_probs):
            raise ValueError("area probabilities must lie in (0, 1)")
        if self.trials_per_cluster < 1 or self.replicates < 1:
            raise ValueError("need at least one trial and one replicate")
        if any(c < 1 for c in self.clusters_per_area):
            raise ValueError("clusters per area must be positive")

    @property
    def n_areas(self) -> int:
        return len(self.area_probs)

    def cells(self, clusters=None, y2=None, sigma2=None) -> list[Cell]:
        """Cartesian grid, optionally filtered; indices refer to the full grid."""
        out = []
        grid = itertools.product(self.clusters_per_area, self.y2_values, self.sigma2_values)
        for k, (c, y, s) in enumerate(grid):
            if clusters is not None and c not in clusters:
                continue
            if y2 is not None and y not in y2:
                continue
            if sigma2 is not None and s not in sigma2:
                continue
            out.append(Cell(k, c, y, s))
        return out

    def default_cells(self) -> list[Cell]:
        # the figure cells: y2 = 0.29 under both variances
        return self.cells(y2=(self.y2_values[0],))

    def benchmark(self, cell: Cell) -> Benchmark:
        return Benchmark.equal_weights(cell.y2, cell.sigma2_y2, self.n_areas)


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def simulate_dataset(spec: SimulationSpec, cell: Cell, replicate: int) -> ClusterDataset:
    """``clusters_per_area`` Binomial(trials, p_i) clusters in every area."""
    rng = np.random.default_rng([spec.seed, cell.clusters_per_area, replicate])
    p = np.asarray(spec.area_probs)
    area = np.repeat(np.arange(spec.n_areas), cell.clusters_per_area)
    trials = np.full(area.size, spec.trials_per_cluster, dtype=np.int64)
    successes = rng.binomial(trials, p[area])
    return ClusterDataset(area, trials, successes, spec.n_areas)


def write_dataset(data: ClusterDataset, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["area", "trials", "successes"])
        for a, n, y in zip(data.area_id, data.trials, data.successes):
            w.writerow([int(a), int(n), int(y)])


def read_dataset(path, n_areas: int) -> ClusterDataset:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    area = np.array([int(r["area"]) for r in rows], dtype=np.int64)
    trials = np.array([int(r["trials"]) for r in rows], dtype=np.int64)
    succ = np.array([int(r["successes"]) for r in rows], dtype=np.int64)
    return ClusterDataset(area, trials, succ, n_areas)


@dataclass(frozen=True)
class RunConfig:
    """Sampler budget for one replicate.

    ``increment`` is the number of recorded draws per chain added between
    checks of a stopping rule; ``thin`` applies to every MCMC run.
    """

    methods: tuple[str, ...] = METHODS
    n_chains: int = 4
    n_warmup: int = 1000
    thin: int = 10
    increment: int = 250
    target_ess: float = 1000.0
    target_accepted: int = 1000
    mh_warmup: int = 1000
    mh_shift_variance: float = 0.1
    max_increments: int = 400
    priors: Priors = field(default_factory=lambda: Priors(cluster_prior="loggamma"))
    workers: int = 1

    def __post_init__(self):
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")

    def sampler(self, seed: int) -> SamplerConfig:
        return SamplerConfig(
            n_chains=self.n_chains,
            n_warmup=self.n_warmup,
            n_draws=self.increment,
            seed=seed,
            thin=self.thin,
        )


@dataclass
class MethodRecord:
    method: str
    status: str = "ok"
    seconds: float = math.nan
    additional_sampling_seconds: float = math.nan
    acceptance_rate: float | None = None
    bulk_ess: float | None = None
    n_draws: int | None = None
    aggregate_mean: float | None = None
    reached: bool | None = None
    result: BenchmarkResult | None = None


@dataclass
class ReplicateReport:
    cell: Cell
    replicate: int
    unbenchmarked_aggregate_mean: float | None
    records: list[MethodRecord]
    summaries: list[tuple]
    ks: list[tuple]


@dataclass
class CellReport:
    cell: Cell
    replicates: list[ReplicateReport]


def _summary_rows(label: str, theta: np.ndarray) -> list[tuple]:
    med = np.median(theta, axis=0)
    mean = theta.mean(axis=0)
    lo, hi = np.quantile(theta, [0.025, 0.975], axis=0)
    return [(label, i, med[i], mean[i], lo[i], hi[i]) for i in range(theta.shape[1])]


def _fail(rec: MethodRecord, exc: Exception) -> MethodRecord:
    log.warning("%s failed: %s", rec.method, exc)
    rec.status = f"failed: {type(exc).__name__}: {exc}"
    return rec


def run_replicate(
    spec: SimulationSpec,
    cell: Cell,
    replicate: int,
    cfg: RunConfig,
    graph: AreaGraph | None = None,
) -> ReplicateReport:
    """Fit, benchmark and time every requested method on one simulated dataset."""
    graph = graph or sa_province_graph()
    data = simulate_dataset(spec, cell, replicate)
    bench = spec.benchmark(cell)
    methods = [m for m in METHODS if m in cfg.methods]
    records: dict[str, MethodRecord] = {}
    draws: dict[str, DrawMatrix] = {}
    summaries: list[tuple] = []
    unb_mean = None
    # shared by every cell with this dataset, so draws are matched across benchmarks
    base = (spec.seed, cell.clusters_per_area, replicate)

    need_unb = any(m in methods for m in ("rejection", "rake", "bayes_estimate"))
    if need_unb:
        unb = _unbenchmarked_stream(data, graph, bench, cfg, base, "rejection" in methods)
        if "rejection" in methods:
            records["rejection"] = unb["rejection"]
            if unb["rejection"].result is not None:
                draws["rejection"] = unb["rejection"].result.draws
        fit_draws = unb["draws"]
        fit_seconds = unb["fit_seconds"]
        if fit_draws is not None:
            unb_mean = float(fit_draws.aggregate(bench.weights).mean())
            summaries += _summary_rows("unbenchmarked", fit_draws.theta)
        for m in ("rake", "bayes_estimate"):
            if m not in methods:
                continue
            rec = MethodRecord(m)
            if fit_draws is None:
                records[m] = _fail(rec, RuntimeError(unb["error"]))
                continue
            t0 = time.perf_counter()
            try:
                res = rake_benchmark(fit_draws, bench) if m == "rake" else bayes_benchmark(fit_draws, bench)
            except Exception as exc:  # recorded per replicate
                records[m] = _fail(rec, exc)
                continue
            post = time.perf_counter() - t0
            rec.seconds = fit_seconds + post
            rec.additional_sampling_seconds = 0.0
            rec.result = res
            rec.n_draws = res.draws.n_draws if res.draws is not None else None
            rec.aggregate_mean = float(np.asarray(res.mean) @ bench.weights)
            rec.reached = unb["reached"]
            records[m] = rec
            if m == "rake":
                summaries += _summary_rows(m, res.draws.theta)

    if "mh" in methods:
        records["mh"] = _mh_pipeline(data, graph, bench, cfg, base + (cell.index, 2))
        if records["mh"].result is not None:
            draws["mh"] = records["mh"].result.draws
    if "joint_oracle" in methods:
        records["joint_oracle"] = _joint_pipeline(data, graph, bench, cfg, base + (cell.index, 3))
        if records["joint_oracle"].result is not None:
            draws["joint_oracle"] = records["joint_oracle"].result.draws

    for m in FULLY_BAYES:
        if m in draws:
            summaries += _summary_rows(m, draws[m].theta)
    if "bayes_estimate" in records and records["bayes_estimate"].result is not None:
        est = records["bayes_estimate"].result.estimates
        summaries += [("bayes_estimate", i, est[i], est[i], math.nan, math.nan) for i in range(est.size)]

    ks = []
    for a, b in itertools.combinations([m for m in FULLY_BAYES if m in draws], 2):
        for i in range(spec.n_areas):
            stat = stats.ks_2samp(draws[a].theta[:, i], draws[b].theta[:, i]).statistic
            ks.append((a, b, i, float(stat)))
    return ReplicateReport(
        cell=cell,
        replicate=replicate,
        unbenchmarked_aggregate_mean=unb_mean,
        records=[records[m] for m in methods],
        summaries=summaries,
        ks=ks,
    )


def _unbenchmarked_stream(data, graph, bench, cfg: RunConfig, base, with_rejection: bool) -> dict:
    """Extend one unbenchmarked run until both stopping rules are met.

    Rejection consumes the draws as they arrive (its clock stops at the
    target acceptance count); the fit clock stops once the bulk ESS target
    is reached, and the draws at that point feed raking and the Bayes estimate.
    """
    rec = MethodRecord("rejection")
    out = {"rejection": rec, "draws": None, "fit_seconds": math.nan, "reached": False, "error": ""}
    t0 = time.perf_counter()
    try:
        run = MCMCRun("unit", data, graph, cfg.priors, cfg.sampler(_seed(*base, 0)))
        run.warmup()
    except Exception as exc:
        out["error"] = str(exc)
        _fail(rec, exc)
        return out
    rej = RejectionBenchmarker(bench, _seed(*base, 1), cfg.target_accepted) if with_rejection else None
    fit_done = False
    for _ in range(cfg.max_increments):
        new = run.extend(cfg.increment)
        if rej is not None and not rej.done:
            rej.feed(new)
            if rej.done:
                rec.seconds = time.perf_counter() - t0
        if not fit_done:
            ess = _safe_ess(run.draws) or 0.0
            if ess >= cfg.target_ess:
                fit_done = True
                out["fit_seconds"] = time.perf_counter() - t0
                out["draws"] = run.draws
                out["reached"] = True
        if fit_done and (rej is None or rej.done):
            break
    if not fit_done:
        out["fit_seconds"] = time.perf_counter() - t0
        out["draws"] = run.draws
    if rej is not None:
        try:
            res = rej.result()
        except Exception as exc:
            _fail(rec, exc)
            return out
        if not rej.done:
            rec.seconds = time.perf_counter() - t0
        rec.reached = rej.done
        rec.result = res
        rec.acceptance_rate = res.acceptance_rate
        rec.additional_sampling_seconds = math.nan
        rec.n_draws = res.draws.n_draws
        rec.bulk_ess = _safe_ess(res.draws)
        rec.aggregate_mean = float(res.draws.aggregate(bench.weights).mean())
        if not rej.done:
            rec.status = "partial"
    return out


def _safe_ess(draws: DrawMatrix) -> float | None:
    try:
        return min_theta_ess(draws)
    except ValueError:
        return None


def _mh_pipeline(data, graph, bench, cfg: RunConfig, base) -> MethodRecord:
    """Fit the shifted model, then run the independence chain over its draws.

    The stopping measure is the smaller of the chain's bulk ESS and the bulk
    ESS of the proposal pool: shuffling the pool hides its autocorrelation
    from the chain's own diagnostic.
    """
    rec = MethodRecord("mh")
    t0 = time.perf_counter()
    try:
        shift = InterceptShiftPrior.for_benchmark(bench, cfg.mh_shift_variance)
        run = MCMCRun("unit", data, graph, cfg.priors.with_shift(shift), cfg.sampler(_seed(*base, 0)))
        mh = MHBenchmarker(bench, shift, cfg.n_chains, cfg.mh_warmup, _seed(*base, 1))
        ess = 0.0
        for _ in range(cfg.max_increments):
            mh.add_rows(run.extend(cfg.increment))
            init = cfg.n_chains * (1 + cfg.mh_warmup) if mh.current is None else 0
            k = (mh.n_available - init) // cfg.n_chains
            if k < 1:
                continue
            mh.run(k)
            out = mh.draws()
            if out.n_draws // cfg.n_chains < 8:
                continue
            ess = min(min_theta_ess(out), min_theta_ess(run.draws))
            if ess >= cfg.target_ess:
                rec.reached = True
                break
        rec.seconds = time.perf_counter() - t0
        res = mh.result()
    except Exception as exc:
        return _fail(rec, exc)
    rec.reached = bool(rec.reached)
    if not rec.reached:
        rec.status = "partial"
    rec.result = res
    rec.acceptance_rate = res.acceptance_rate
    rec.bulk_ess = ess
    rec.n_draws = res.draws.n_draws
    rec.aggregate_mean = float(res.draws.aggregate(bench.weights).mean())
    return rec


def _joint_pipeline(data, graph, bench, cfg: RunConfig, base) -> MethodRecord:
    rec = MethodRecord("joint_oracle")
    t0 = time.perf_counter()
    try:
        run = MCMCRun("unit", data, graph, cfg.priors, cfg.sampler(_seed(*base, 0)), bench=bench)
        ess = 0.0
        for _ in range(cfg.max_increments):
            run.extend(cfg.increment)
            ess = min_theta_ess(run.draws)
            if ess >= cfg.target_ess:
                rec.reached = True
                break
        rec.seconds = time.perf_counter() - t0
        draws = run.draws
    except Exception as exc:
        return _fail(rec, exc)
    rec.reached = bool(rec.reached)
    if not rec.reached:
        rec.status = "partial"
    rec.result = BenchmarkResult(method="joint", draws=draws)
    rec.bulk_ess = ess
    rec.n_draws = draws.n_draws
    rec.aggregate_mean = float(draws.aggregate(bench.weights).mean())
    return rec


def _task(args):
    spec, cell, replicate, cfg = args
    rep = run_replicate(spec, cell, replicate, cfg)
    # results carry full draw matrices; drop them before crossing processes
    for r in rep.records:
        r.result = None
    return rep


def run_cells(spec: SimulationSpec, cells: Sequence[Cell], cfg: RunConfig) -> list[CellReport]:
    """Run every replicate of every cell, in a process pool when ``cfg.workers > 1``."""
    tasks = [(spec, c, r, cfg) for c in cells for r in range(spec.replicates)]
    if cfg.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            reps = list(pool.map(_task, tasks))
    else:
        reps = []
        for t in tasks:
            log.info("cell %s replicate %d", t[1].label, t[2])
            reps.append(_task(t))
    out = []
    for c in cells:
        out.append(CellReport(c, [r for r in reps if r.cell == c]))
    return out


def run_cell(spec: SimulationSpec, cell: Cell, methods: Iterable[str], cfg: RunConfig) -> CellReport:
    cfg = replace(cfg, methods=tuple(m for m in METHODS if m in set(methods)))
    return run_cells(spec, [cell], cfg)[0]


# ---------------------------------------------------------------------------
# Report tables
# ---------------------------------------------------------------------------

_CELL_COLS = ["cell", "clusters_per_area", "y2", "sigma2_y2", "replicate"]
RESULT_COLS = _CELL_COLS + [
    "method", "status", "reached", "acceptance_rate", "bulk_ess", "n_draws", "aggregate_mean",
    "unbenchmarked_aggregate_mean",
]
SUMMARY_COLS = _CELL_COLS + ["method", "area", "median", "mean", "lower95", "upper95"]
KS_COLS = _CELL_COLS + ["method_a", "method_b", "area", "ks"]
TIMING_COLS = _CELL_COLS + [
    "method", "seconds", "additional_sampling_seconds", "acceptance_rate", "bulk_ess",
]
BOXPLOT_COLS = ["method", "clusters_per_area", "y2", "sigma2_y2", "replicate", "seconds"]

DETERMINISTIC_FILES = ("results.csv", "summaries.csv", "ks.csv")
TIMING_FILES = ("timings.csv", "boxplot.csv", "soft_checks.json")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return str(x).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        # shortest repr round-trips exactly
        return "" if math.isnan(x) else repr(float(x))
    return str(x)


def _write(path: Path, cols, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _cell_prefix(c: Cell, rep: int) -> tuple:
    return (c.index, c.clusters_per_area, c.y2, c.sigma2_y2, rep)


def emit_report(reports: Sequence[CellReport], out_dir) -> dict[str, Path]:
    """Write the report tables; returns their paths keyed by file name.

    ``results``, ``summaries`` and ``ks`` are fully determined by the seed.
    Wall-clock seconds live in ``timings``, ``boxplot`` and ``soft_checks``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results, summaries, ks, timings, box = [], [], [], [], []
    for cr in reports:
        for rr in sorted(cr.replicates, key=lambda r: r.replicate):
            pre = _cell_prefix(cr.cell, rr.replicate)
            for rec in rr.records:
                results.append(pre + (
                    rec.method, rec.status, rec.reached, rec.acceptance_rate, rec.bulk_ess,
                    rec.n_draws, rec.aggregate_mean, rr.unbenchmarked_aggregate_mean,
                ))
                timings.append(pre + (
                    rec.method, rec.seconds, rec.additional_sampling_seconds,
                    rec.acceptance_rate, rec.bulk_ess,
                ))
                box.append((rec.method, cr.cell.clusters_per_area, cr.cell.y2,
                            cr.cell.sigma2_y2, rr.replicate, rec.seconds))
            summaries += [pre + row for row in rr.summaries]
            ks += [pre + row for row in rr.ks]
    paths = {}
    for name, cols, rows in (
        ("results.csv", RESULT_COLS, results),
        ("summaries.csv", SUMMARY_COLS, summaries),
        ("ks.csv", KS_COLS, ks),
        ("timings.csv", TIMING_COLS, timings),
        ("boxplot.csv", BOXPLOT_COLS, box),
    ):
        paths[name] = out / name
        _write(paths[name], cols, rows)
    paths["soft_checks.json"] = out / "soft_checks.json"
    paths["soft_checks.json"].write_text(json.dumps(soft_checks(reports), indent=2) + "\n")
    return paths


def soft_checks(reports: Sequence[CellReport]) -> list[dict]:
    """Qualitative timing orderings: MH faster than rejection for the small
    benchmark variance, slower for the large one. Logged, never enforced."""
    variances = sorted({cr.cell.sigma2_y2 for cr in reports})
    out = []
    for cr in reports:
        times = {}
        for m in ("rejection", "mh"):
            secs = [r.seconds for rr in cr.replicates for r in rr.records
                    if r.method == m and r.status == "ok"]
            if secs:
                times[m] = float(np.median(secs))
        if len(times) < 2:
            continue
        small = cr.cell.sigma2_y2 == variances[0] and len(variances) > 1
        expect = "mh < rejection" if small else "rejection < mh"
        holds = times["mh"] < times["rejection"] if small else times["rejection"] < times["mh"]
        entry = {"cell": cr.cell.label, "median_seconds": times, "expected": expect, "holds": holds}
        log.info("soft check %s: %s -> %s", cr.cell.label, expect, holds)
        out.append(entry)
    return out
