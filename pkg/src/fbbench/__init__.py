"""Fully Bayesian benchmarking of small-area prevalence estimates."""

from .core import (
    H_MARGINAL,
    Benchmark,
    BenchmarkResult,
    ClusterDataset,
    DirectEstimates,
    DrawMatrix,
    Method,
    benchmark_loglik,
    direct_estimates,
    expit,
    logit,
    read_draws,
    write_draws,
)
from .spatial import AreaGraph, sa_province_graph

__version__ = "0.1.0"

__all__ = [
    "H_MARGINAL",
    "AreaGraph",
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
    "read_draws",
    "sa_province_graph",
    "write_draws",
]
