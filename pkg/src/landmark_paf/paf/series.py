"""Landmark series of estimates and subject-level bootstrap intervals."""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import pandas as pd

from ..errors import LandmarkPafError, TooManyFailures
from ..event_data import (
    ValidatedCohort,
    build_landmark_dataset,
    fmt_float,
    stack_landmarks,
)
from .estimators import IpwOptions, Method, estimate_at_landmark
from .supermodel import SupermodelSpec, supermodel_fit

SERIES_COLUMNS = ("landmark", "method", "estimate", "ci_low", "ci_high", "n_at_risk",
                  "n_exposed", "n_cases", "flag")


@dataclass(frozen=True)
class EstimatorConfig:
    adjustment: tuple[str, ...] = ()
    censoring_route: str = "auto"
    ipw: IpwOptions = IpwOptions()
    supermodel: SupermodelSpec = SupermodelSpec()
    ci_level: float = 0.95
    max_failure_fraction: float = 0.2


@dataclass
class EstimateSeries:
    """Estimates over landmarks for one method and window."""

    method: Method
    window: float
    adjustment: tuple[str, ...]
    landmark: np.ndarray
    estimate: np.ndarray
    n_at_risk: np.ndarray
    n_exposed: np.ndarray
    n_cases: np.ndarray
    flag: list[str]
    ci_low: np.ndarray | None = None
    ci_high: np.ndarray | None = None
    n_failed: np.ndarray | None = None
    replicates: np.ndarray | None = field(default=None, repr=False)
    extras: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.landmark)

    def to_frame(self) -> pd.DataFrame:
        n = len(self)
        nan = np.full(n, np.nan)
        df = pd.DataFrame({
            "landmark": self.landmark,
            "method": [self.method.value] * n,
            "estimate": self.estimate,
            "ci_low": self.ci_low if self.ci_low is not None else nan,
            "ci_high": self.ci_high if self.ci_high is not None else nan,
            "n_at_risk": self.n_at_risk,
            "n_exposed": self.n_exposed,
            "n_cases": self.n_cases,
            "flag": self.flag,
        })
        if self.n_failed is not None:
            df["n_failed"] = self.n_failed
        return df

    def to_csv(self, path=None) -> str:
        return frame_to_csv(self.to_frame(), path)


def frame_to_csv(df: pd.DataFrame, path=None) -> str:
    """Deterministic CSV: shortest round-trip floats, empty for missing, LF endings."""
    lines = [",".join(df.columns)]
    cols = [df[c].to_numpy() for c in df.columns]
    for i in range(len(df)):
        cells = []
        for c in cols:
            v = c[i]
            if isinstance(v, (float, np.floating)):
                cells.append(fmt_float(float(v)))
            elif isinstance(v, (int, np.integer)):
                cells.append(str(int(v)))
            else:
                cells.append("" if v is None else str(v))
        lines.append(",".join(cells))
    text = "\n".join(lines) + "\n"
    if path is not None:
        with open(path, "w", newline="\n", encoding="utf-8") as fh:
            fh.write(text)
    return text


def _needed_covariates(cohort: ValidatedCohort, config: EstimatorConfig):
    names = list(dict.fromkeys(list(config.adjustment) + list(config.ipw.confounders)))
    return [n for n in names if n in cohort.covariate_schema] if names else []


def _point_series(cohort: ValidatedCohort, landmarks: Sequence[float], h: float, method: Method,
                  config: EstimatorConfig):
    """Point estimates, flags and risk-set counts; never raises for per-landmark failures."""
    covs = _needed_covariates(cohort, config)
    L = len(landmarks)
    est = np.full(L, np.nan)
    n_risk = np.zeros(L, dtype=np.int64)
    n_exp = np.zeros(L, dtype=np.int64)
    n_cases = np.zeros(L, dtype=np.int64)
    flags = [""] * L
    datasets = {}
    for j, l in enumerate(landmarks):
        try:
            ds = build_landmark_dataset(cohort, l, h, covariates=covs)
        except LandmarkPafError as err:
            flags[j] = type(err).__name__
            continue
        datasets[j] = ds
        n_risk[j] = len(ds)
        n_exp[j] = ds.n_exposed
        n_cases[j] = ds.n_cases
    extras = {}
    if method is Method.SUPERMODEL:
        try:
            res = supermodel_fit(stack_landmarks(list(datasets.values())), config.supermodel,
                                 config.adjustment, config.censoring_route)
            idx = np.array(sorted(datasets))
            est[idx] = res.paf(np.asarray(landmarks, dtype=float)[idx])
            extras["supermodel"] = res
        except (LandmarkPafError, ValueError) as err:
            for j in datasets:
                flags[j] = type(err).__name__
        return est, flags, n_risk, n_exp, n_cases, extras
    comps = {}
    for j, ds in datasets.items():
        r = estimate_at_landmark(method, ds, cohort, config.adjustment, config.censoring_route,
                                 config.ipw)
        est[j] = r.estimate
        flags[j] = r.flag
        comps[j] = r.components
    extras["components"] = comps
    return est, flags, n_risk, n_exp, n_cases, extras


def estimate_series(cohort: ValidatedCohort, landmarks: Sequence[float], h: float, method,
                    config: EstimatorConfig = EstimatorConfig(), bootstrap: int | None = None,
                    seed: int | None = None, workers: int = 1) -> EstimateSeries:
    """Estimate the attributable fraction at every landmark.

    Failures at a landmark are recorded in ``flag`` with a missing
    estimate. With ``bootstrap`` replicates the series carries percentile
    intervals (see :func:`bootstrap_series`).
    """
    if len(landmarks) == 0:
        raise ValueError("no landmarks given")
    method = Method.parse(method)
    landmarks = np.asarray(sorted(float(x) for x in landmarks))
    est, flags, n_risk, n_exp, n_cases, extras = _point_series(cohort, landmarks, h, method, config)
    series = EstimateSeries(method, float(h), tuple(config.adjustment), landmarks, est, n_risk,
                            n_exp, n_cases, flags, extras=extras)
    if bootstrap:
        if seed is None:
            raise ValueError("a seed is required for the bootstrap")
        series = _attach_bootstrap(series, cohort, config, bootstrap, seed, workers)
    return series


def replicate_seeds(seed: int, B: int):
    """Child seeds for replicates ``0..B-1``; a prefix of a longer run's seeds."""
    return np.random.SeedSequence(seed).spawn(B)


def _replicate(args):
    cohort, landmarks, h, method, config, ss = args
    rng = np.random.default_rng(ss)
    idx = rng.integers(0, len(cohort), len(cohort))
    boot = cohort.take(np.sort(idx))
    est, flags, *_ = _point_series(boot, landmarks, h, method, config)
    return est, flags


def _attach_bootstrap(series: EstimateSeries, cohort, config: EstimatorConfig, B: int, seed: int,
                      workers: int) -> EstimateSeries:
    if B < 2:
        raise ValueError("the bootstrap needs B >= 2")
    seeds = replicate_seeds(seed, B)
    tasks = [(cohort, series.landmark, series.window, series.method, config, ss) for ss in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_replicate, tasks, chunksize=max(1, B // (4 * workers))))
    else:
        results = [_replicate(t) for t in tasks]
    reps = np.array([r[0] for r in results])
    failed = ~np.isfinite(reps)
    n_failed = failed.sum(axis=0)
    alpha = 1.0 - config.ci_level
    L = len(series)
    lo, hi = np.full(L, np.nan), np.full(L, np.nan)
    worst = None
    for j in range(L):
        if series.flag[j]:
            continue
        if n_failed[j] > config.max_failure_fraction * B:
            if worst is None or n_failed[j] > n_failed[worst]:
                worst = j
            continue
        v = reps[~failed[:, j], j]
        if v.size == 0:
            continue
        a, b = np.percentile(v, [100 * alpha / 2, 100 * (1 - alpha / 2)])
        # keep the point estimate inside its interval
        lo[j] = min(a, series.estimate[j])
        hi[j] = max(b, series.estimate[j])
    if worst is not None:
        raise TooManyFailures(series.landmark[worst], int(n_failed[worst]), B)
    return replace(series, ci_low=lo, ci_high=hi, n_failed=n_failed, replicates=reps)


def bootstrap_series(cohort: ValidatedCohort, landmarks: Sequence[float], h: float, method,
                     config: EstimatorConfig = EstimatorConfig(), B: int = 500, seed: int | None = None,
                     workers: int = 1) -> EstimateSeries:
    """Percentile bootstrap intervals from resampling whole subject trajectories.

    Each replicate draws subjects with replacement, relabels duplicates as
    distinct subjects and reruns the whole pipeline (landmark datasets,
    weights, models). Replicates failing at a landmark are dropped there
    and counted in ``n_failed``; more than ``max_failure_fraction`` of
    failures at any landmark raises :class:`TooManyFailures`.
    """
    if seed is None:
        raise ValueError("a seed is required for the bootstrap")
    if B < 2:
        raise ValueError("the bootstrap needs B >= 2")
    return estimate_series(cohort, landmarks, h, method, config, bootstrap=B, seed=seed,
                           workers=workers)


def summarize_replications(series_list: Sequence[EstimateSeries]) -> pd.DataFrame:
    """Per landmark and method: mean, median, quartiles and count of finite estimates."""
    frames = [s.to_frame()[["landmark", "method", "estimate"]] for s in series_list]
    df = pd.concat(frames, ignore_index=True)
    df = df[np.isfinite(df["estimate"].astype(float))]
    g = df.groupby(["method", "landmark"], sort=True)["estimate"]
    out = pd.DataFrame({
        "mean": g.mean(),
        "median": g.median(),
        "q1": g.quantile(0.25),
        "q3": g.quantile(0.75),
        "n": g.size(),
    }).reset_index()
    return out[["landmark", "method", "mean", "median", "q1", "q3", "n"]]
