"""Command-line entry point: ``landmark-paf {simulate,truth,estimate,bootstrap,report}``."""
from __future__ import annotations

import argparse
import glob
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from ..errors import ConfigError, LandmarkPafError, NoEligibleLandmarks
from ..event_data import (
    ValidatedCohort,
    choose_landmarks,
    landmark_grid,
    read_cohort_csv,
    write_cohort_csv,
)
from ..paf import Method, coefficient_table, estimate_series, frame_to_csv, summarize_replications
from ..simulator import SimConfig, simulate_cohort, true_paf
from .config import RunConfig, load_config

log = logging.getLogger("landmark_paf")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """Collects written artifacts and writes the manifest."""

    def __init__(self, command: str, cfg: RunConfig):
        self.command = command
        self.cfg = cfg
        self.out = Path(cfg.output)
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[Path] = []
        self.warnings = 0

    def write_text(self, name: str, text: str) -> Path:
        p = self.out / name
        with open(p, "w", newline="\n", encoding="utf-8") as fh:
            fh.write(text)
        self.artifacts.append(p)
        return p

    def add(self, p: Path):
        self.artifacts.append(Path(p))

    def finish(self):
        manifest = {
            "command": self.command,
            "config": self.cfg.echo(),
            "seed": self.cfg.seed,
            "artifacts": {p.name: _sha256(p) for p in sorted(self.artifacts, key=lambda q: q.name)},
        }
        with open(self.out / "manifest.json", "w", newline="\n", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")


def derived_seeds(seed: int, k: int) -> list[int]:
    """Independent 64-bit seeds for replications ``0..k-1``."""
    out = []
    for child in np.random.SeedSequence(seed).spawn(k):
        a, b = child.generate_state(2)
        out.append(int(a) << 32 | int(b))
    return out


def _oracle_landmarks(cfg: RunConfig, horizon: float):
    if cfg.landmark_list is not None:
        return cfg.landmark_list
    g = cfg.grid or {}
    spacing = g.get("spacing", 1.0)
    start = g.get("start", 0.0)
    stop = g.get("stop", horizon - cfg.window)
    return [float(x) for x in np.arange(start, stop + 1e-9, spacing)]


def _oracle_frame(cfg: RunConfig, horizon: float) -> pd.DataFrame:
    lms = _oracle_landmarks(cfg, horizon)
    return pd.DataFrame({
        "landmark": lms,
        "true_paf_at_landmark": [true_paf(cfg.model, l, cfg.window, "AtLandmark") for l in lms],
        "true_paf_window": [true_paf(cfg.model, l, cfg.window, "Window") for l in lms],
    })


def _require(cond, msg):
    if not cond:
        raise ConfigError(msg)


def cmd_truth(cfg: RunConfig, run: Run):
    _require(cfg.model is not None, "simulate.model is required")
    _require(cfg.window is not None, "window is required")
    _require(cfg.horizon is not None, "simulate.horizon is required")
    run.write_text("oracle.csv", frame_to_csv(_oracle_frame(cfg, cfg.horizon)))


def cmd_simulate(cfg: RunConfig, run: Run):
    _require(cfg.model is not None, "simulate.model is required")
    _require(cfg.seed is not None, "a seed is required to simulate")
    _require(cfg.sim_n >= 1, "simulate.n must be >= 1")
    _require(cfg.horizon is not None, "simulate.horizon is required")
    _require(cfg.replications >= 1, "simulate.replications must be >= 1")
    seeds = derived_seeds(cfg.seed, cfg.replications)
    for r, s in enumerate(seeds):
        cohort = simulate_cohort(cfg.model, SimConfig(cfg.sim_n, s, cfg.horizon, cfg.censoring_rate))
        p = run.out / f"cohort_{r + 1:03d}.csv"
        write_cohort_csv(cohort, p)
        run.add(p)
    if cfg.window is not None:
        cmd_truth(cfg, run)


def _landmarks(cfg: RunConfig, cohort: ValidatedCohort):
    if cfg.landmark_list is not None:
        grid = cfg.landmark_list
    else:
        g = cfg.grid or {}
        grid = landmark_grid(cohort, cfg.window, spacing=g.get("spacing", 1.0), start=g.get("start", 0.0),
                             stop=g.get("stop"))
    lms = choose_landmarks(cohort, cfg.window, cfg.min_count, grid=grid)
    if not lms:
        raise NoEligibleLandmarks(f"no landmark has {cfg.min_count} exposed and unexposed subjects at risk")
    return lms


def _estimate_one(cfg: RunConfig, cohort_path: str, bootstrap: bool):
    cohort = read_cohort_csv(cohort_path, panel_path=cfg.panel, horizon=cfg.horizon)
    lms = _landmarks(cfg, cohort)
    out = []
    for i, method in enumerate(cfg.methods):
        seed = None
        if bootstrap:
            # one seed stream per method so adding a method leaves the others unchanged
            seed = derived_seeds(cfg.seed, len(Method))[list(Method).index(method)]
        out.append(estimate_series(cohort, lms, cfg.window, method, cfg.estimator,
                                   bootstrap=cfg.B if bootstrap else None, seed=seed,
                                   workers=cfg.threads))
    return out


def _write_series(run: Run, series_list, stem: str, plot: bool):
    df = pd.concat([s.to_frame() for s in series_list], ignore_index=True)
    run.write_text(f"{stem}.csv", frame_to_csv(df))
    flagged = int((df["flag"] != "").sum())
    run.warnings += flagged
    for s in series_list:
        res = s.extras.get("supermodel")
        if res is not None:
            rows = coefficient_table(res)
            coef = pd.DataFrame(rows, columns=["model", "term", "estimate", "robust_se", "wald", "p_value"])
            run.write_text(f"{stem}_supermodel_coefficients.csv", frame_to_csv(coef))
            tests = pd.DataFrame([(t.model, " ".join(t.terms), t.statistic, t.df, t.p_value) for t in res.wald],
                                 columns=["model", "terms", "wald", "df", "p_value"])
            run.write_text(f"{stem}_supermodel_wald.csv", frame_to_csv(tests))
    if plot:
        from .plots import plot_series
        p = run.out / f"{stem}.svg"
        plot_series(series_list, p)
        run.add(p)


def _cmd_estimate(cfg: RunConfig, run: Run, plot: bool, bootstrap: bool):
    _require(bool(cfg.cohort), "input.cohort is required")
    _require(cfg.window is not None, "window is required")
    if bootstrap:
        _require(cfg.seed is not None, "a seed is required for the bootstrap")
        _require(cfg.B is not None and cfg.B >= 2, "bootstrap.B must be >= 2")
    paths = []
    for pattern in cfg.cohort:
        hits = sorted(glob.glob(pattern))
        paths.extend(hits if hits else [pattern])
    stem = "bootstrap" if bootstrap else "estimates"
    if len(paths) == 1:
        _write_series(run, _estimate_one(cfg, paths[0], bootstrap), stem, plot)
        return
    # replication-summary mode
    all_series = []
    for k, p in enumerate(paths):
        series = _estimate_one(cfg, p, bootstrap)
        _write_series(run, series, f"{stem}_{Path(p).stem}", False)
        all_series.extend(series)
    run.write_text("summary.csv", frame_to_csv(summarize_replications(all_series)))


def cmd_report(cfg: RunConfig, run: Run, inputs):
    paths = []
    for pattern in list(inputs) or cfg.report_inputs:
        hits = sorted(glob.glob(pattern))
        paths.extend(hits if hits else [pattern])
    _require(bool(paths), "report needs estimate CSVs (report.inputs or positional paths)")
    frames = []
    for p in paths:
        try:
            frames.append(pd.read_csv(p, keep_default_na=False, na_values=[""], float_precision="round_trip"))
        except OSError as err:
            raise ConfigError(f"cannot read {p}: {err}") from err
    df = pd.concat(frames, ignore_index=True)
    df = df[np.isfinite(pd.to_numeric(df["estimate"], errors="coerce"))]
    g = df.groupby(["method", "landmark"], sort=True)["estimate"]
    out = pd.DataFrame({"mean": g.mean(), "median": g.median(), "q1": g.quantile(0.25),
                        "q3": g.quantile(0.75), "n": g.size()}).reset_index()
    out = out[["landmark", "method", "mean", "median", "q1", "q3", "n"]]
    run.write_text("summary.csv", frame_to_csv(out))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="landmark-paf",
                                     description="Landmark attributable-fraction estimation.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file")
    common.add_argument("--threads", type=int, help="worker processes (default: LANDMARK_PAF_THREADS "
                                                    "or the number of CPUs)")
    common.add_argument("--seed", type=int, help="random seed (unsigned 64-bit)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--method", help="comma-separated methods, e.g. LM_Miettinen,PAF0_Pseudo")
    common.add_argument("--plot", action="store_true", help="write an SVG figure")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate cohorts and the oracle curves")
    sub.add_parser("truth", parents=[common], help="oracle attributable fractions of a model")
    sub.add_parser("estimate", parents=[common], help="estimate over landmarks")
    b = sub.add_parser("bootstrap", parents=[common], help="estimate with bootstrap intervals")
    b.add_argument("-B", type=int, help="number of bootstrap replicates")
    r = sub.add_parser("report", parents=[common], help="summarize estimates over replications")
    r.add_argument("inputs", nargs="*", help="estimate CSV files or glob patterns")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    overrides = {"seed": args.seed, "output": args.out, "threads": args.threads,
                 "methods": args.method, "B": getattr(args, "B", None)}
    try:
        cfg = load_config(args.config, overrides)
        run = Run(args.command, cfg)
        if args.command == "simulate":
            cmd_simulate(cfg, run)
        elif args.command == "truth":
            cmd_truth(cfg, run)
        elif args.command == "estimate":
            _cmd_estimate(cfg, run, args.plot, bootstrap=False)
        elif args.command == "bootstrap":
            _cmd_estimate(cfg, run, args.plot, bootstrap=True)
        elif args.command == "report":
            cmd_report(cfg, run, args.inputs)
        run.finish()
    except (LandmarkPafError, ValueError) as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2
    if run.warnings:
        print(f"warning: {run.warnings} landmark estimate(s) flagged; see the flag column", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
