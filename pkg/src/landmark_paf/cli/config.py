"""Run configuration: one YAML file plus command-line overrides."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ..errors import ConfigError
from ..paf import EstimatorConfig, IpwOptions, Method, SupermodelSpec
from ..simulator import HazardModelSpec

KNOWN_SECTIONS = {"input", "landmarks", "window", "methods", "adjustment", "censoring_route", "ipw",
                  "supermodel", "bootstrap", "seed", "output", "simulate", "report", "threads"}


@dataclass
class RunConfig:
    raw: dict
    cohort: list[str] = field(default_factory=list)
    panel: str | None = None
    horizon: float | None = None
    landmark_list: list[float] | None = None
    grid: dict | None = None
    min_count: int = 20
    window: float | None = None
    methods: list[Method] = field(default_factory=lambda: [Method.LM_MIETTINEN])
    estimator: EstimatorConfig = EstimatorConfig()
    B: int | None = None
    seed: int | None = None
    output: str = "out"
    threads: int = 1
    model: HazardModelSpec | None = None
    sim_n: int = 0
    replications: int = 1
    censoring_rate: float | None = None
    report_inputs: list[str] = field(default_factory=list)

    def echo(self) -> dict:
        """Resolved configuration as plain data (for the manifest)."""
        out = dict(self.raw)
        out["seed"] = self.seed
        out["output"] = self.output
        out["methods"] = [m.value for m in self.methods]
        out.pop("threads", None)
        return out


def _section(raw, key):
    v = raw.get(key) or {}
    if not isinstance(v, dict):
        raise ConfigError(f"section {key!r} must be a mapping")
    return v


def _list(v):
    if v is None:
        return []
    if isinstance(v, (str, int, float)):
        return [v]
    return list(v)


def load_config(path: str | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Read and validate a configuration; ``overrides`` (from flags) win over the file."""
    raw: dict = {}
    base = Path(".")
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = yaml.safe_load(fh) or {}
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        except yaml.YAMLError as err:
            raise ConfigError(f"invalid YAML in {path}: {err}") from err
        if not isinstance(raw, dict):
            raise ConfigError("the config file must hold a mapping")
        base = Path(path).resolve().parent
    unknown = set(raw) - KNOWN_SECTIONS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    raw = {**raw}
    for k in ("seed", "output"):
        if k in overrides:
            raw[k] = overrides[k]
    if "methods" in overrides:
        raw["methods"] = overrides["methods"]

    def resolve(p):
        return str(p) if os.path.isabs(str(p)) else str(base / str(p))

    cfg = RunConfig(raw=raw)
    inp = _section(raw, "input")
    cfg.cohort = [resolve(p) for p in _list(inp.get("cohort"))]
    cfg.panel = resolve(inp["panel"]) if inp.get("panel") else None
    cfg.horizon = float(inp["horizon"]) if inp.get("horizon") is not None else None

    lm = _section(raw, "landmarks")
    if "list" in lm and "grid" in lm:
        raise ConfigError("give either landmarks.list or landmarks.grid, not both")
    if "list" in lm:
        cfg.landmark_list = [float(x) for x in _list(lm["list"])]
    elif "grid" in lm:
        g = lm["grid"] or {}
        if not isinstance(g, dict):
            raise ConfigError("landmarks.grid must be a mapping (start, stop, spacing)")
        cfg.grid = {k: float(v) for k, v in g.items() if v is not None}
    cfg.min_count = int(lm.get("min_count", 20))
    if cfg.min_count < 1:
        raise ConfigError("landmarks.min_count must be >= 1")

    if raw.get("window") is not None:
        cfg.window = float(raw["window"])
        if not cfg.window > 0:
            raise ConfigError("window must be > 0")
    methods = raw.get("methods")
    if methods is not None:
        if isinstance(methods, str):
            methods = [m.strip() for m in methods.split(",") if m.strip()]
        try:
            cfg.methods = [Method.parse(m) for m in methods]
        except ValueError as err:
            raise ConfigError(str(err)) from err

    ipw = _section(raw, "ipw")
    sm = _section(raw, "supermodel")
    bs = _section(raw, "bootstrap")
    try:
        trunc = ipw.get("truncation_percentile", 99.0)
        ipw_opts = IpwOptions(
            truncation_percentile=None if trunc is None else float(trunc),
            grid_step=float(ipw.get("grid_step", 1.0)),
            exposure_as_covariate=bool(ipw.get("exposure_as_covariate", True)),
            confounders=tuple(_list(ipw.get("confounders"))),
            lag=float(ipw.get("lag", 0.0)),
        )
        spec = SupermodelSpec(
            degree=int(sm.get("degree", 2)),
            interact_intercept=bool(sm.get("interact_intercept", True)),
            interact_effect=bool(sm.get("interact_effect", True)),
            basis=str(sm.get("basis", "polynomial")),
        )
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err
    cfg.estimator = EstimatorConfig(
        adjustment=tuple(_list(raw.get("adjustment"))),
        censoring_route=str(raw.get("censoring_route", "auto")),
        ipw=ipw_opts,
        supermodel=spec,
        ci_level=float(bs.get("ci_level", 0.95)),
        max_failure_fraction=float(bs.get("max_failure_fraction", 0.2)),
    )
    if cfg.estimator.censoring_route not in ("auto", "Complete", "PseudoValues"):
        raise ConfigError("censoring_route must be auto, Complete or PseudoValues")
    if "B" in overrides:
        bs = {**bs, "B": overrides["B"]}
        raw["bootstrap"] = bs
    if bs.get("B") is not None:
        cfg.B = int(bs["B"])
    if raw.get("seed") is not None:
        try:
            cfg.seed = int(raw["seed"])
        except (TypeError, ValueError) as err:
            raise ConfigError(f"seed must be an integer, got {raw['seed']!r}") from err
        if not 0 <= cfg.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
    cfg.output = str(raw.get("output", "out"))

    sim = _section(raw, "simulate")
    if sim:
        try:
            cfg.model = HazardModelSpec.from_dict(sim["model"]) if "model" in sim else None
        except (KeyError, TypeError, ValueError) as err:
            raise ConfigError(f"invalid simulate.model: {err}") from err
        cfg.sim_n = int(sim.get("n", 0))
        cfg.replications = int(sim.get("replications", 1))
        if sim.get("horizon") is not None:
            cfg.horizon = float(sim["horizon"])
        cfg.censoring_rate = float(sim["censoring_rate"]) if sim.get("censoring_rate") else None
    rep = _section(raw, "report")
    cfg.report_inputs = [resolve(p) for p in _list(rep.get("inputs"))]

    threads = overrides.get("threads") or raw.get("threads") or os.environ.get("LANDMARK_PAF_THREADS")
    try:
        cfg.threads = int(threads) if threads else (os.cpu_count() or 1)
    except ValueError as err:
        raise ConfigError(f"invalid thread count {threads!r}") from err
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    return cfg
