"""Cohort data model, validation and landmark-dataset construction.

A cohort is stored column-wise (one numpy array per field) so that landmark
datasets, bootstrap resamples and simulated cohorts with tens of thousands of
subjects can be processed without materialising per-subject Python objects.
:class:`SubjectRecord` and :class:`LandmarkRow` are the record-level views used
at the API boundary; they are built lazily on request.

Conventions
-----------
* A subject is at risk at landmark ``l`` iff ``entry_time <= l < final_time``.
  An event exactly at ``l`` belongs to the past.
* A subject is exposed at ``t`` iff ``exposure_time <= t``.
* The prediction window is ``(l, l + h]``; an event at ``l + h`` is inside.
"""
from __future__ import annotations

import csv
import math
import numbers
from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import (
    CohortValidationError,
    DuplicateId,
    EmptyRiskSet,
    ExposureAfterEvent,
    InputFormatError,
    MixedWindows,
    NegativeTime,
    TimeBeforeEntry,
    UnknownCovariate,
)

NUMERIC = "numeric"
CATEGORICAL = "categorical"


class EventType(IntEnum):
    CENSORED = 0
    EVENT = 1
    COMPETING = 2


class Outcome(IntEnum):
    NO_EVENT = 0
    EVENT = 1
    CENSORED = 2


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: object
    entry_time: float
    exposure_time: float | None
    final_time: float
    event_type: int
    baseline_covariates: Mapping[str, object] = field(default_factory=dict)
    covariate_panel: Sequence[tuple[float, Mapping[str, object]]] = ()


@dataclass(frozen=True)
class Violation:
    code: str
    subject_id: object
    message: str


_ERROR_CLASSES = {
    "DuplicateId": DuplicateId,
    "NegativeTime": NegativeTime,
    "ExposureAfterEvent": ExposureAfterEvent,
    "UnknownCovariate": UnknownCovariate,
}


def _readonly(a):
    a = np.asarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CovariatePanel:
    """Time-varying covariate values in compressed row format.

    Rows for cohort position ``i`` are ``ptr[i]:ptr[i + 1]`` with strictly
    increasing ``times``. Missing values are NaN (numeric) or None.
    """

    ptr: np.ndarray
    times: np.ndarray
    values: Mapping[str, np.ndarray]

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        counts = self.ptr[idx + 1] - self.ptr[idx]
        ptr = np.concatenate([[0], np.cumsum(counts)])
        rows = np.concatenate([np.arange(self.ptr[i], self.ptr[i + 1]) for i in idx]) if len(idx) else np.zeros(0, np.int64)
        rows = rows.astype(np.int64)
        return CovariatePanel(
            _readonly(ptr),
            _readonly(self.times[rows]),
            {k: _readonly(v[rows]) for k, v in self.values.items()},
        )


@dataclass(frozen=True, eq=False)
class ValidatedCohort:
    """An immutable, validated cohort in columnar form.

    Build one with :func:`validate_cohort`, :func:`read_cohort_csv` or the
    simulator; do not call the constructor with unvalidated arrays.
    """

    subject_ids: np.ndarray
    entry_time: np.ndarray
    exposure_time: np.ndarray  # NaN = never exposed
    final_time: np.ndarray
    event_type: np.ndarray
    baseline: Mapping[str, np.ndarray]
    covariate_schema: Mapping[str, str]
    has_censoring: bool
    study_horizon: float
    panel: CovariatePanel | None = None

    def __len__(self):
        return len(self.subject_ids)

    @cached_property
    def records(self) -> tuple[SubjectRecord, ...]:
        out = []
        for i in range(len(self)):
            base = {k: _py(v[i]) for k, v in self.baseline.items()}
            base = {k: v for k, v in base.items() if v is not None}
            panel = ()
            if self.panel is not None:
                rows = range(self.panel.ptr[i], self.panel.ptr[i + 1])
                panel = tuple(
                    (float(self.panel.times[r]),
                     {k: _py(v[r]) for k, v in self.panel.values.items() if _py(v[r]) is not None})
                    for r in rows)
            e = self.exposure_time[i]
            out.append(SubjectRecord(
                subject_id=_py(self.subject_ids[i]),
                entry_time=float(self.entry_time[i]),
                exposure_time=None if np.isnan(e) else float(e),
                final_time=float(self.final_time[i]),
                event_type=int(self.event_type[i]),
                baseline_covariates=base,
                covariate_panel=panel,
            ))
        return tuple(out)

    def take(self, idx, relabel=True):
        """Cohort made of the subjects at positions ``idx`` (repeats allowed).

        With ``relabel`` the new subjects get ids ``0..len(idx)-1`` so that
        repeated draws of one subject stay distinct (bootstrap resampling).
        """
        idx = np.asarray(idx, dtype=np.int64)
        ids = np.arange(len(idx)) if relabel else self.subject_ids[idx]
        return ValidatedCohort(
            subject_ids=_readonly(ids),
            entry_time=_readonly(self.entry_time[idx]),
            exposure_time=_readonly(self.exposure_time[idx]),
            final_time=_readonly(self.final_time[idx]),
            event_type=_readonly(self.event_type[idx]),
            baseline={k: _readonly(v[idx]) for k, v in self.baseline.items()},
            covariate_schema=dict(self.covariate_schema),
            has_censoring=self.has_censoring,
            study_horizon=self.study_horizon,
            panel=None if self.panel is None else self.panel.take(idx),
        )

    def covariates_at(self, t, names=None, lag=0.0, positions=None):
        """Covariate values at time ``t - lag`` (last observation carried forward).

        ``t`` may be a scalar or an array aligned with ``positions``.
        """
        names = list(self.covariate_schema) if names is None else list(names)
        pos = np.arange(len(self)) if positions is None else np.asarray(positions, dtype=np.int64)
        tq = np.broadcast_to(np.asarray(t, dtype=float) - lag, pos.shape)
        out = {}
        for name in names:
            if name not in self.covariate_schema:
                raise KeyError(name)
            base = self.baseline.get(name)
            if base is None:
                kind = self.covariate_schema[name]
                base = np.full(len(self), np.nan) if kind == NUMERIC else np.full(len(self), None, dtype=object)
            vals = base[pos].copy()
            if self.panel is not None and name in self.panel.values:
                vals = _panel_locf(self.panel, self.panel.values[name], pos, tq, vals)
            out[name] = vals
        return out


def _py(v):
    if v is None:
        return None
    if isinstance(v, (float, np.floating)):
        return None if np.isnan(v) else float(v)
    if isinstance(v, np.integer):
        return int(v)
    return v


def _is_missing(v):
    return v is None or (isinstance(v, float) and math.isnan(v))


def _panel_locf(panel, column, pos, tq, fallback):
    """Last non-missing panel value at or before ``tq`` per position."""
    out = fallback
    numeric = column.dtype.kind == "f"
    for j, (i, t) in enumerate(zip(pos, tq)):
        lo, hi = panel.ptr[i], panel.ptr[i + 1]
        if hi == lo:
            continue
        k = lo + np.searchsorted(panel.times[lo:hi], t, side="right") - 1
        while k >= lo:
            v = column[k]
            if not (np.isnan(v) if numeric else v is None):
                out[j] = v
                break
            k -= 1
    return out


def _infer_schema(records):
    kinds = {}
    for r in records:
        items = list(r.baseline_covariates.items())
        for _, vals in r.covariate_panel:
            items.extend(vals.items())
        for k, v in items:
            if _is_missing(v):
                continue
            is_num = isinstance(v, numbers.Real) and not isinstance(v, bool)
            prev = kinds.get(k)
            kinds[k] = NUMERIC if is_num and prev in (None, NUMERIC) else CATEGORICAL
    return dict(sorted(kinds.items()))


def _column(values, kind):
    if kind == NUMERIC:
        return np.array([np.nan if _is_missing(v) else float(v) for v in values], dtype=float)
    return np.array([None if _is_missing(v) else v for v in values], dtype=object)


def validate_cohort(records: Iterable[SubjectRecord], schema: Mapping[str, str] | None = None,
                    horizon: float | None = None, has_censoring: bool | None = None) -> ValidatedCohort:
    """Check every record invariant and return the cohort in columnar form.

    Parameters
    ----------
    records : iterable of SubjectRecord
    schema : mapping of covariate name to ``"numeric"`` or ``"categorical"``.
        Inferred from the values when omitted.
    horizon : float, optional
        Study horizon (administrative end of follow-up). Defaults to the
        largest ``final_time``.
    has_censoring : bool, optional
        Whether censoring before the horizon is allowed. When omitted it is
        inferred from the data. Subjects with ``event_type == 0`` at
        ``final_time >= horizon`` are administratively complete and never count
        as censored.

    Raises
    ------
    CohortValidationError
        Carrying *all* violations; the concrete subclass (``DuplicateId``,
        ``NegativeTime``, ``ExposureAfterEvent``, ``UnknownCovariate``) is that
        of the first violation found.
    """
    records = list(records)
    if not records:
        raise ValueError("records must be nonempty")
    if schema is None:
        schema = _infer_schema(records)
    schema = dict(schema)
    for k, kind in schema.items():
        if kind not in (NUMERIC, CATEGORICAL):
            raise ValueError(f"covariate {k!r}: unknown kind {kind!r}")
    if horizon is None:
        horizon = max(float(r.final_time) for r in records)
    horizon = float(horizon)

    violations = []

    def bad(code, r, msg):
        violations.append(Violation(code, r.subject_id, msg))

    seen = set()
    for r in records:
        if r.subject_id in seen:
            bad("DuplicateId", r, "subject_id appears more than once")
        seen.add(r.subject_id)
        entry, final = float(r.entry_time), float(r.final_time)
        if not (math.isfinite(entry) and math.isfinite(final)):
            bad("NegativeTime", r, "entry_time and final_time must be finite")
            continue
        if entry < 0:
            bad("NegativeTime", r, f"entry_time {entry} < 0")
        if final < entry:
            bad("NegativeTime", r, f"final_time {final} < entry_time {entry}")
        if final > horizon:
            bad("BeyondHorizon", r, f"final_time {final} exceeds study horizon {horizon}")
        if r.exposure_time is not None:
            e = float(r.exposure_time)
            if e < entry:
                bad("NegativeTime", r, f"exposure_time {e} < entry_time {entry}")
            if e > final:
                bad("ExposureAfterEvent", r, f"exposure_time {e} > final_time {final}")
        if int(r.event_type) not in (0, 1, 2):
            bad("InvalidEventType", r, f"event_type {r.event_type!r} not in {{0, 1, 2}}")
        elif int(r.event_type) == 0 and final < horizon and has_censoring is False:
            bad("UnexpectedCensoring", r, "censored before the horizon but the cohort declares no censoring")
        for k in r.baseline_covariates:
            if k not in schema:
                bad("UnknownCovariate", r, f"baseline covariate {k!r} not in schema")
        prev = None
        for t, vals in r.covariate_panel:
            t = float(t)
            if prev is not None and t <= prev:
                bad("InvalidPanel", r, "covariate panel times must be strictly increasing")
            if t < entry or t > final:
                bad("InvalidPanel", r, f"panel time {t} outside [{entry}, {final}]")
            prev = t
            for k in vals:
                if k not in schema:
                    bad("UnknownCovariate", r, f"panel covariate {k!r} not in schema")

    if violations:
        cls = _ERROR_CLASSES.get(violations[0].code, CohortValidationError)
        raise cls(violations)

    records.sort(key=lambda r: r.subject_id)
    n = len(records)
    censored = any(int(r.event_type) == 0 and float(r.final_time) < horizon for r in records)
    ids = np.empty(n, dtype=object)
    ids[:] = [r.subject_id for r in records]
    baseline = {k: _readonly(_column([r.baseline_covariates.get(k) for r in records], kind))
                for k, kind in schema.items()}
    panel = None
    if any(r.covariate_panel for r in records):
        counts = [len(r.covariate_panel) for r in records]
        ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        flat = [(float(t), vals) for r in records for t, vals in r.covariate_panel]
        names = sorted({k for _, vals in flat for k in vals})
        panel = CovariatePanel(
            _readonly(ptr),
            _readonly(np.array([t for t, _ in flat], dtype=float)),
            {k: _readonly(_column([vals.get(k) for _, vals in flat], schema[k])) for k in names},
        )
    return ValidatedCohort(
        subject_ids=_readonly(ids),
        entry_time=_readonly(np.array([float(r.entry_time) for r in records])),
        exposure_time=_readonly(np.array([np.nan if r.exposure_time is None else float(r.exposure_time)
                                          for r in records])),
        final_time=_readonly(np.array([float(r.final_time) for r in records])),
        event_type=_readonly(np.array([int(r.event_type) for r in records], dtype=np.int8)),
        baseline=baseline,
        covariate_schema=schema,
        has_censoring=bool(censored if has_censoring is None else has_censoring),
        study_horizon=horizon,
        panel=panel,
    )


def exposure_state_at(record: SubjectRecord, t: float) -> bool:
    """Exposure state of one subject at time ``t`` (acquired at ``t`` counts)."""
    if t < record.entry_time:
        raise TimeBeforeEntry(f"t={t} precedes entry_time={record.entry_time} of subject {record.subject_id!r}")
    return record.exposure_time is not None and record.exposure_time <= t


# ---------------------------------------------------------------------------
# landmark datasets

@dataclass(frozen=True)
class LandmarkRow:
    subject_id: object
    exposure_at_l: bool
    covariates_at_l: Mapping[str, object]
    outcome: Outcome
    time_in_window: float | None
    exposure_time_in_window: float | None
    event_type: int


@dataclass(frozen=True, eq=False)
class LandmarkDataset:
    """At-risk snapshot at landmark ``l`` with window outcomes over ``(l, l + h]``.

    Arrays are aligned row-wise. ``stop`` is ``min(final_time, l + h)`` and
    ``status`` is the event type observed at ``stop`` (0 when the subject
    survived the window or was censored), so the competing-risk structure
    inside the window is retained even though ``outcome`` collapses
    competing events into ``NO_EVENT``.
    """

    landmark: float
    window: float
    subject_ids: np.ndarray
    positions: np.ndarray  # row -> position in the source cohort
    exposed: np.ndarray
    outcome: np.ndarray
    stop: np.ndarray
    status: np.ndarray
    exposure_in_window: np.ndarray  # NaN when none
    covariates: Mapping[str, np.ndarray]
    covariate_schema: Mapping[str, str]
    study_horizon: float

    def __len__(self):
        return len(self.subject_ids)

    @property
    def has_censoring(self):
        return bool(np.any(self.outcome == Outcome.CENSORED))

    @property
    def n_exposed(self):
        return int(self.exposed.sum())

    @property
    def n_cases(self):
        return int(np.sum(self.outcome == Outcome.EVENT))

    @property
    def event(self):
        return (self.outcome == Outcome.EVENT).astype(float)

    @cached_property
    def rows(self) -> tuple[LandmarkRow, ...]:
        end = self.landmark + self.window
        out = []
        for i in range(len(self)):
            t = float(self.stop[i])
            in_window = t < end or self.status[i] != 0
            e = self.exposure_in_window[i]
            out.append(LandmarkRow(
                subject_id=_py(self.subject_ids[i]),
                exposure_at_l=bool(self.exposed[i]),
                covariates_at_l={k: _py(v[i]) for k, v in self.covariates.items()},
                outcome=Outcome(int(self.outcome[i])),
                time_in_window=t if in_window else None,
                exposure_time_in_window=None if np.isnan(e) else float(e),
                event_type=int(self.status[i]),
            ))
        return tuple(out)

    def subset(self, mask):
        mask = np.asarray(mask)
        return LandmarkDataset(
            landmark=self.landmark, window=self.window,
            subject_ids=self.subject_ids[mask], positions=self.positions[mask],
            exposed=self.exposed[mask], outcome=self.outcome[mask],
            stop=self.stop[mask], status=self.status[mask],
            exposure_in_window=self.exposure_in_window[mask],
            covariates={k: v[mask] for k, v in self.covariates.items()},
            covariate_schema=self.covariate_schema, study_horizon=self.study_horizon,
        )


def at_risk_mask(cohort: ValidatedCohort, l: float) -> np.ndarray:
    return (cohort.entry_time <= l) & (cohort.final_time > l)


def build_landmark_dataset(cohort: ValidatedCohort, l: float, h: float,
                           covariates: Sequence[str] | None = None) -> LandmarkDataset:
    """Landmark dataset of all subjects at risk at ``l`` with outcomes in ``(l, l+h]``.

    ``covariates`` restricts which covariates are evaluated at ``l`` (all
    schema covariates by default).
    """
    if l < 0:
        raise ValueError(f"landmark must be >= 0, got {l}")
    if not h > 0:
        raise ValueError(f"window must be > 0, got {h}")
    pos = np.flatnonzero(at_risk_mask(cohort, l))
    if len(pos) == 0:
        raise EmptyRiskSet(f"no subjects at risk at landmark {l}")
    end = l + h
    final = cohort.final_time[pos]
    etype = cohort.event_type[pos].astype(np.int8)
    expo = cohort.exposure_time[pos]
    with np.errstate(invalid="ignore"):
        exposed = expo <= l
        in_win = final <= end
        outcome = np.full(len(pos), Outcome.NO_EVENT, dtype=np.int8)
        outcome[in_win & (etype == EventType.EVENT)] = Outcome.EVENT
        # censoring exactly at l + h means the whole closed window was observed
        outcome[(etype == EventType.CENSORED) & (final < end)] = Outcome.CENSORED
        expo_win = np.where(~exposed & (expo <= end), expo, np.nan)
    stop = np.minimum(final, end)
    status = np.where(in_win, etype, 0).astype(np.int8)
    names = list(cohort.covariate_schema) if covariates is None else list(covariates)
    covs = cohort.covariates_at(l, names, positions=pos)
    return LandmarkDataset(
        landmark=float(l), window=float(h),
        subject_ids=cohort.subject_ids[pos], positions=pos,
        exposed=exposed, outcome=outcome, stop=stop, status=status,
        exposure_in_window=expo_win, covariates=covs,
        covariate_schema={k: cohort.covariate_schema[k] for k in names},
        study_horizon=cohort.study_horizon,
    )


def risk_set_counts(cohort: ValidatedCohort, landmarks) -> tuple[np.ndarray, np.ndarray]:
    """Numbers of unexposed and exposed subjects at risk at each landmark."""
    lm = np.asarray(landmarks, dtype=float)[:, None]
    at_risk = (cohort.entry_time[None, :] <= lm) & (cohort.final_time[None, :] > lm)
    with np.errstate(invalid="ignore"):
        exposed = cohort.exposure_time[None, :] <= lm
    return (at_risk & ~exposed).sum(axis=1), (at_risk & exposed).sum(axis=1)


def landmark_grid(cohort: ValidatedCohort, window: float, spacing: float = 1.0,
                  start: float = 0.0, stop: float | None = None, full_window: bool = True):
    """Candidate landmarks ``start, start + spacing, ...``.

    With ``full_window`` the grid stops where ``l + window`` would pass the
    study horizon.
    """
    if not spacing > 0:
        raise ValueError("spacing must be > 0")
    last = cohort.study_horizon - (window if full_window else 0.0)
    if stop is not None:
        last = min(last, stop)
    if last < start:
        return np.zeros(0)
    k = np.arange(int(math.floor((last - start) / spacing + 1e-9)) + 1)
    return start + spacing * k


def choose_landmarks(cohort: ValidatedCohort, window: float, min_count: int = 20,
                     grid=None, spacing: float = 1.0) -> list[float]:
    """Landmarks where both the exposed and unexposed risk sets have ``min_count`` subjects."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    if grid is None:
        grid = landmark_grid(cohort, window, spacing)
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        return []
    unexposed, exposed = risk_set_counts(cohort, grid)
    keep = (unexposed >= min_count) & (exposed >= min_count)
    return [float(x) for x in grid[keep]]


@dataclass(frozen=True, eq=False)
class StackedLandmarkDataset:
    datasets: Mapping[float, LandmarkDataset]
    window: float
    landmark: np.ndarray
    subject_ids: np.ndarray
    exposed: np.ndarray
    outcome: np.ndarray
    covariates: Mapping[str, np.ndarray]
    covariate_schema: Mapping[str, str]

    def __len__(self):
        return len(self.landmark)

    @property
    def event(self):
        return (self.outcome == Outcome.EVENT).astype(float)


def stack_landmarks(datasets: Sequence[LandmarkDataset]) -> StackedLandmarkDataset:
    """Stack landmark datasets into one long dataset with a landmark column."""
    datasets = sorted(datasets, key=lambda d: d.landmark)
    if not datasets:
        raise ValueError("nothing to stack")
    windows = {d.window for d in datasets}
    if len(windows) > 1:
        raise MixedWindows(f"datasets use different windows: {sorted(windows)}")
    lms = [d.landmark for d in datasets]
    if len(set(lms)) != len(lms):
        raise ValueError("duplicate landmark in stack")
    names = list(datasets[0].covariates)
    cat = np.concatenate
    return StackedLandmarkDataset(
        datasets={d.landmark: d for d in datasets},
        window=datasets[0].window,
        landmark=cat([np.full(len(d), d.landmark) for d in datasets]),
        subject_ids=cat([d.subject_ids for d in datasets]),
        exposed=cat([d.exposed for d in datasets]),
        outcome=cat([d.outcome for d in datasets]),
        covariates={k: cat([d.covariates[k] for d in datasets]) for k in names},
        covariate_schema=dict(datasets[0].covariate_schema),
    )


# ---------------------------------------------------------------------------
# CSV interfaces

COHORT_COLUMNS = ["subject_id", "entry_time", "exposure_time", "final_time", "event_type"]


def fmt_float(x) -> str:
    """Shortest round-trip representation; empty for missing values."""
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return ""
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def _fmt_value(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return fmt_float(v)
    return str(v)


def write_cohort_csv(cohort: ValidatedCohort, path, panel_path=None):
    names = list(cohort.covariate_schema)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COHORT_COLUMNS + names)
        for i in range(len(cohort)):
            w.writerow([_fmt_value(_py(cohort.subject_ids[i])), fmt_float(cohort.entry_time[i]),
                        fmt_float(cohort.exposure_time[i]), fmt_float(cohort.final_time[i]),
                        str(int(cohort.event_type[i]))]
                       + [_fmt_value(cohort.baseline[k][i]) for k in names])
    if panel_path is not None and cohort.panel is not None:
        pnames = list(cohort.panel.values)
        with open(panel_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subject_id", "time"] + pnames)
            for i in range(len(cohort)):
                for r in range(cohort.panel.ptr[i], cohort.panel.ptr[i + 1]):
                    w.writerow([_fmt_value(_py(cohort.subject_ids[i])), fmt_float(cohort.panel.times[r])]
                               + [_fmt_value(cohort.panel.values[k][r]) for k in pnames])


def _parse_float(value, row, col, allow_empty=False):
    if value is None or (isinstance(value, str) and value.strip() == ""):
        if allow_empty:
            return None
        raise InputFormatError(f"row {row}: column {col!r} is empty")
    try:
        return float(value)
    except ValueError:
        raise InputFormatError(f"row {row}: column {col!r} has non-numeric value {value!r}") from None


def read_cohort_csv(path, schema: Mapping[str, str] | None = None, panel_path=None,
                    horizon: float | None = None, has_censoring: bool | None = None) -> ValidatedCohort:
    """Read and validate a cohort CSV (one row per subject) plus optional long panel CSV.

    Row numbers in error messages count the header as row 1.
    """
    df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    missing = [c for c in COHORT_COLUMNS if c not in df.columns]
    if missing:
        raise InputFormatError(f"{path}: missing required column(s) {missing}")
    extra = [c for c in df.columns if c not in COHORT_COLUMNS]
    if schema is None:
        schema = {c: _guess_kind(df[c]) for c in extra}
        if panel_path is not None:
            pdf0 = pd.read_csv(panel_path, dtype=str, keep_default_na=False, encoding="utf-8")
            for c in pdf0.columns[2:]:
                schema.setdefault(c, _guess_kind(pdf0[c]))
    else:
        unknown = [c for c in extra if c not in schema]
        if unknown:
            raise InputFormatError(f"{path}: undeclared covariate column(s) {unknown}")
    panels: dict[str, list] = {}
    if panel_path is not None:
        pdf = pd.read_csv(panel_path, dtype=str, keep_default_na=False, encoding="utf-8")
        for c in ("subject_id", "time"):
            if c not in pdf.columns:
                raise InputFormatError(f"{panel_path}: missing required column {c!r}")
        for j, rec in enumerate(pdf.to_dict("records")):
            row = j + 2
            t = _parse_float(rec["time"], row, "time")
            vals = {}
            for c in pdf.columns[2:]:
                if c not in schema:
                    raise InputFormatError(f"{panel_path}: undeclared covariate column {c!r}")
                v = _parse_cov(rec[c], schema[c], row, c)
                if v is not None:
                    vals[c] = v
            panels.setdefault(rec["subject_id"], []).append((t, vals))
    records = []
    ids = df["subject_id"].tolist()
    numeric_ids = all(_looks_int(s) for s in ids)
    for j, rec in enumerate(df.to_dict("records")):
        row = j + 2
        et = _parse_float(rec["event_type"], row, "event_type")
        if et not in (0.0, 1.0, 2.0):
            raise InputFormatError(f"row {row}: event_type must be 0, 1 or 2, got {rec['event_type']!r}")
        base = {}
        for c in extra:
            v = _parse_cov(rec[c], schema[c], row, c)
            if v is not None:
                base[c] = v
        sid = rec["subject_id"]
        records.append(SubjectRecord(
            subject_id=int(sid) if numeric_ids else sid,
            entry_time=_parse_float(rec["entry_time"], row, "entry_time"),
            exposure_time=_parse_float(rec["exposure_time"], row, "exposure_time", allow_empty=True),
            final_time=_parse_float(rec["final_time"], row, "final_time"),
            event_type=int(et),
            baseline_covariates=base,
            covariate_panel=tuple(sorted(panels.pop(sid, []), key=lambda p: p[0])),
        ))
    if panels:
        raise InputFormatError(f"{panel_path}: panel rows for unknown subject(s) {sorted(panels)[:5]}")
    try:
        return validate_cohort(records, schema=schema, horizon=horizon, has_censoring=has_censoring)
    except CohortValidationError as err:
        rows: dict = {}
        for j, r in enumerate(records):
            rows.setdefault(r.subject_id, j + 2)
        located = [Violation(v.code, v.subject_id, f"row {rows.get(v.subject_id, '?')}: {v.message}")
                   for v in err.violations]
        raise type(err)(located) from None


def _looks_int(s):
    s = s.strip()
    return s.lstrip("-").isdigit()


def _guess_kind(col):
    for v in col:
        if v.strip() == "":
            continue
        try:
            float(v)
        except ValueError:
            return CATEGORICAL
    return NUMERIC


def _parse_cov(value, kind, row, col):
    if value.strip() == "":
        return None
    if kind == NUMERIC:
        return _parse_float(value, row, col)
    return value
