"""Command line entry point: ``fbbench <subcommand>``.

Subcommands: simulate, fit, benchmark, diagnose, report. Every artifact is
a file (cluster CSV, draw CSV + JSON sidecar, JSON report, report tables).
Progress goes to standard error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .benchmarkers import (
    BenchmarkInconsistent,
    RakingError,
    bayes_benchmark,
    mh_benchmark,
    rake_benchmark,
    rejection_benchmark,
)
from .config import describe, load_config
from .core import Benchmark, BenchmarkResult, logit, read_draws, write_draws
from .diagnostics import diagnose
from .harness import Cell, emit_report, read_dataset, run_cells, simulate_dataset, write_dataset
from .inference import MCMCRun, fit_joint_oracle
from .models import InterceptShiftPrior
from .spatial import AreaGraph, sa_province_graph

log = logging.getLogger("fbbench")


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _graph(path) -> AreaGraph:
    return sa_province_graph() if path is None else AreaGraph.from_file(path)


def _benchmark(args, n_areas: int) -> Benchmark:
    if args.weights is None:
        return Benchmark.equal_weights(args.y2, args.sigma2, n_areas)
    w = np.array([float(t) for t in args.weights.split(",")])
    return Benchmark(args.y2, args.sigma2, w)


def _write_json(obj, path) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _common(p: argparse.ArgumentParser, graph: bool = True) -> None:
    p.add_argument("--config", help="plain-text key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    if graph:
        p.add_argument("--graph", help="adjacency file (default: bundled nine-province graph)")


def _bench_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--y2", type=float, required=True, help="national benchmark")
    p.add_argument("--sigma2", type=float, required=True, help="benchmark variance")
    p.add_argument("--weights", help="comma-separated area weights (default equal)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fbbench", description="Benchmark small-area prevalence posteriors.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate one cluster dataset from the grid")
    _common(p, graph=False)
    p.add_argument("--clusters", type=int, required=True, help="clusters per area")
    p.add_argument("--replicate", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit", help="fit an unbenchmarked (or intercept-shifted) model")
    _common(p)
    p.add_argument("--data", required=True, help="cluster CSV (area,trials,successes)")
    p.add_argument("--model", choices=("unit", "fh"), default="unit")
    p.add_argument("--shift-y2", type=float, help="fit the adjusted model centred at logit(y2)")
    p.add_argument("--out", required=True, help="draw CSV path")
    p.add_argument("--report", help="JSON report path (default stdout)")

    p = sub.add_parser("benchmark", help="benchmark draws")
    _common(p)
    p.add_argument("--method", choices=("rejection", "mh", "rake", "bayes", "joint"), required=True)
    _bench_args(p)
    p.add_argument("--draws", help="input draws (adjusted-model draws for mh)")
    p.add_argument("--data", help="cluster CSV, needed by joint")
    p.add_argument("--model", choices=("unit", "fh"), default="unit")
    p.add_argument("--target-accepted", type=int)
    p.add_argument("--mh-draws", type=int, help="recorded MH steps per chain")
    p.add_argument("--mh-warmup", type=int, default=1000)
    p.add_argument("--replace", action="store_true", help="MH proposals with replacement")
    p.add_argument("--lambda", dest="lam", type=float, default=math.inf)
    p.add_argument("--rng-seed", type=int, default=0)
    p.add_argument("--out", help="benchmarked draw CSV")
    p.add_argument("--report", help="JSON report path (default stdout)")

    p = sub.add_parser("diagnose", help="convergence diagnostics of a draw file")
    p.add_argument("--draws", required=True)
    p.add_argument("--rhat-threshold", type=float, default=1.01)
    p.add_argument("--ess-threshold", type=float, default=400.0)
    p.add_argument("--report", help="JSON report path (default stdout)")

    p = sub.add_parser("report", help="run the simulation grid and write report tables")
    _common(p, graph=False)
    p.add_argument("--clusters", type=int, nargs="+", help="filter clusters per area")
    p.add_argument("--y2", type=float, nargs="+", help="filter benchmark values")
    p.add_argument("--sigma2", type=float, nargs="+", help="filter benchmark variances")
    p.add_argument("--all-cells", action="store_true", help="run the full grid")
    p.add_argument("--out-dir", required=True)
    return ap


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, _overrides(args.set), harness=True)
    spec = cfg.simulation
    cell = Cell(-1, args.clusters, spec.y2_values[0], spec.sigma2_values[0])
    data = simulate_dataset(spec, cell, args.replicate)
    write_dataset(data, args.out)
    log.info("wrote %d clusters to %s", data.n_clusters, args.out)
    return 0


def cmd_fit(args) -> int:
    cfg = load_config(args.config, _overrides(args.set))
    graph = _graph(args.graph)
    data = read_dataset(args.data, graph.n_areas)
    priors = cfg.priors
    if args.shift_y2 is not None:
        priors = priors.with_shift(InterceptShiftPrior(logit(args.shift_y2), cfg.run.mh_shift_variance))
    run = MCMCRun(args.model, data, graph, priors, cfg.sampler)
    draws = run.run()
    write_draws(draws, args.out)
    rep = diagnose(draws)
    _write_json(
        {
            "model": args.model,
            "n_draws": draws.n_draws,
            "acceptance_rates": run.acceptance_rates(),
            "diagnostics": rep.to_dict(),
            "settings": describe(cfg),
        },
        args.report,
    )
    return 0


def cmd_benchmark(args) -> int:
    cfg = load_config(args.config, _overrides(args.set))
    graph = _graph(args.graph)
    bench = _benchmark(args, graph.n_areas)
    m = args.method
    if m == "joint":
        if args.data is None:
            raise SystemExit("benchmark --method joint needs --data")
        data = read_dataset(args.data, graph.n_areas)
        draws = fit_joint_oracle(args.model, data, graph, cfg.priors, bench, cfg.sampler)
        res = BenchmarkResult(method="joint", draws=draws, diagnostics=diagnose(draws))
    else:
        if args.draws is None:
            raise SystemExit(f"benchmark --method {m} needs --draws")
        draws = read_draws(args.draws)
        try:
            if m == "rejection":
                res = rejection_benchmark(draws, bench, args.target_accepted, args.rng_seed)
            elif m == "mh":
                shift = InterceptShiftPrior.for_benchmark(bench, cfg.run.mh_shift_variance)
                res = mh_benchmark(
                    draws, bench, shift, n_chains=cfg.sampler.n_chains, n_warmup=args.mh_warmup,
                    n_draws=args.mh_draws, rng_seed=args.rng_seed, replace=args.replace,
                )
                res.diagnostics = diagnose(res.draws)
            elif m == "rake":
                res = rake_benchmark(draws, bench)
            else:
                res = bayes_benchmark(draws, bench, lam=args.lam)
        except (BenchmarkInconsistent, RakingError) as exc:
            log.error("%s", exc)
            _write_json({"method": m, "error": str(exc)}, args.report)
            return 2
    if args.out and res.draws is not None:
        write_draws(res.draws, args.out)
    _write_json(res.to_dict(), args.report)
    return 0


def cmd_diagnose(args) -> int:
    draws = read_draws(args.draws)
    rep = diagnose(draws, args.rhat_threshold, args.ess_threshold)
    _write_json(rep.to_dict(), args.report)
    return 0


def cmd_report(args) -> int:
    cfg = load_config(args.config, _overrides(args.set), harness=True)
    spec = cfg.simulation
    if args.all_cells:
        cells = spec.cells()
    elif args.clusters or args.y2 or args.sigma2:
        cells = spec.cells(args.clusters, args.y2, args.sigma2)
    else:
        cells = spec.default_cells()
    if not cells:
        raise SystemExit("no grid cells match the filters")
    run = cfg.harness_run()
    log.info("running %d cells x %d replicates", len(cells), spec.replicates)
    reports = run_cells(spec, cells, run)
    paths = emit_report(reports, args.out_dir)
    settings = describe(cfg)
    settings["cells"] = [c.label for c in cells]
    (Path(args.out_dir) / "settings.json").write_text(
        json.dumps(settings, indent=2, sort_keys=True) + "\n"
    )
    for name, path in paths.items():
        log.info("wrote %s", path)
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "benchmark": cmd_benchmark,
    "diagnose": cmd_diagnose,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s")
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
