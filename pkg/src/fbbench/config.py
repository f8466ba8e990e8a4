"""Plain-text ``key = value`` configuration.

Blank lines and ``#`` comments are ignored; section headers are optional
and only group keys for readability (all keys share one namespace).
Lists are comma separated. Unknown keys are rejected.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .harness import METHODS, RunConfig, SimulationSpec
from .inference import SamplerConfig
from .models import Priors

__all__ = ["Config", "load_config", "parse_config"]

_PRIOR_KEYS = {
    "pc_U": float,
    "pc_alpha": float,
    "beta_a": float,
    "beta_b": float,
    "intercept_prior": str,
    "intercept_variance": float,
    "cluster_prior": str,
    "cluster_pc_U": float,
    "cluster_pc_alpha": float,
    "loggamma_shape": float,
    "loggamma_rate": float,
}
_SAMPLER_KEYS = {
    "n_chains": int,
    "n_warmup": int,
    "n_draws": int,
    "seed": int,
    "thin": int,
    "target_accept": float,
    "init_step": float,
}


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _strs(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


# simulation keys map onto SimulationSpec fields
_SIM_KEYS = {
    "area_probs": ("area_probs", _floats),
    "trials_per_cluster": ("trials_per_cluster", int),
    "clusters_per_area": ("clusters_per_area", _ints),
    "y2": ("y2_values", _floats),
    "sigma2_y2": ("sigma2_values", _floats),
    "replicates": ("replicates", int),
    "sim_seed": ("seed", int),
}
_RUN_KEYS = {
    "methods": ("methods", _strs),
    "increment": ("increment", int),
    "target_ess": ("target_ess", float),
    "target_accepted": ("target_accepted", int),
    "mh_warmup": ("mh_warmup", int),
    "sigma_plus2": ("mh_shift_variance", float),
    "max_increments": ("max_increments", int),
    "workers": ("workers", int),
}


@dataclass
class Config:
    priors: Priors = field(default_factory=Priors)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    simulation: SimulationSpec = field(default_factory=SimulationSpec)
    run: RunConfig = field(default_factory=RunConfig)

    def harness_run(self) -> RunConfig:
        """Run settings with the sampler and prior options folded in."""
        return replace(
            self.run,
            priors=self.priors,
            n_chains=self.sampler.n_chains,
            n_warmup=self.sampler.n_warmup,
            thin=self.sampler.thin,
        )


def parse_config(text: str, overrides: dict[str, str] | None = None, harness: bool = False) -> Config:
    """Build a ``Config`` from config text plus ``key -> value`` overrides.

    With ``harness=True`` the defaults are the simulation settings
    (loggamma cluster prior, thinning 10) instead of the library defaults.
    """
    parser = configparser.ConfigParser(
        inline_comment_prefixes=("#",), interpolation=None, default_section="__defaults__"
    )
    parser.optionxform = str  # keep key case (pc_U)
    body = text if text.lstrip().startswith("[") else "[config]\n" + text
    parser.read_string(body)
    values: dict[str, str] = {}
    for sec in parser.sections():
        for key, val in parser.items(sec):
            if key in values:
                raise ValueError(f"key {key!r} given twice")
            values[key] = val
    values.update(overrides or {})

    prior_kw, sampler_kw, sim_kw, run_kw = {}, {}, {}, {}
    for key, raw in values.items():
        raw = raw.strip()
        if key in _PRIOR_KEYS:
            prior_kw[key] = _PRIOR_KEYS[key](raw)
        elif key in _SAMPLER_KEYS:
            sampler_kw[key] = _SAMPLER_KEYS[key](raw)
        elif key in _SIM_KEYS:
            name, conv = _SIM_KEYS[key]
            sim_kw[name] = conv(raw)
        elif key in _RUN_KEYS:
            name, conv = _RUN_KEYS[key]
            run_kw[name] = conv(raw)
        else:
            raise ValueError(f"unknown config key {key!r}")

    if harness:
        prior_kw.setdefault("cluster_prior", "loggamma")
        sampler_kw.setdefault("thin", RunConfig().thin)
    if "methods" in run_kw:
        bad = set(run_kw["methods"]) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}; choose from {METHODS}")
    priors = Priors(**prior_kw)
    return Config(
        priors=priors,
        sampler=SamplerConfig(**sampler_kw),
        simulation=SimulationSpec(**sim_kw),
        run=RunConfig(priors=priors, **run_kw),
    )


def load_config(path=None, overrides: dict[str, str] | None = None, harness: bool = False) -> Config:
    text = "" if path is None else Path(path).read_text()
    return parse_config(text, overrides, harness)


def config_keys() -> list[str]:
    return sorted([*_PRIOR_KEYS, *_SAMPLER_KEYS, *_SIM_KEYS, *_RUN_KEYS])


def describe(cfg: Config) -> dict:
    """Flat view of the effective settings, for JSON reports."""
    out = {}
    for obj in (cfg.priors, cfg.sampler, cfg.simulation):
        for f in fields(obj):
            val = getattr(obj, f.name)
            out[f.name] = sorted(val) if isinstance(val, frozenset) else val
    for f in fields(cfg.run):
        if f.name != "priors":
            out["run." + f.name] = getattr(cfg.run, f.name)
    return out
