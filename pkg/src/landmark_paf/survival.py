"""Conditional cumulative incidence and dynamic pseudo-observations.

Everything here works on a landmark dataset: subjects at risk at ``l`` with
follow-up truncated at ``l + h``. Ties at a common time are resolved as
events first, then censorings, then exposure-censorings, i.e. the risk set at
``t`` contains everyone with ``stop >= t``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyRiskSet, HorizonExceeded, SingleSubject
from .event_data import EventType, LandmarkDataset


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous step function."""

    times: np.ndarray
    values: np.ndarray
    initial: float = 0.0

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("jump times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        k = np.searchsorted(self.times, t, side="right") - 1
        vals = np.concatenate([[self.initial], self.values])
        out = vals[k + 1]
        return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ConditionalCIF:
    landmark: float
    window: float
    cause: int
    curve: StepFunction
    at_window_end: float


@dataclass(frozen=True)
class PseudoValueSet:
    landmark: float
    window: float
    subject_ids: np.ndarray
    values: np.ndarray
    full_sample_estimate: float
    n_used: int


def _event_table(stop, status, cause):
    """Distinct event times with risk-set sizes, all-cause and cause-specific counts."""
    ev = status != 0
    times = np.unique(stop[ev])
    if times.size == 0:
        z = np.zeros(0)
        return times, z, z, z
    # at risk at t: stop >= t
    srt = np.sort(stop)
    n_risk = len(stop) - np.searchsorted(srt, times, side="left")
    idx = np.searchsorted(times, stop[ev])
    d_all = np.bincount(idx, minlength=times.size).astype(float)
    d_c = np.bincount(idx, weights=(status[ev] == cause).astype(float), minlength=times.size)
    return times, n_risk.astype(float), d_all, d_c


def aalen_johansen(stop, status, cause=1):
    """Aalen-Johansen cumulative incidence of ``cause`` and all-cause survival.

    Returns ``(times, cif, surv)`` evaluated at the distinct event times.
    """
    stop = np.asarray(stop, dtype=float)
    status = np.asarray(status)
    times, n, d, dc = _event_table(stop, status, cause)
    if times.size == 0:
        return times, np.zeros(0), np.zeros(0)
    q = 1.0 - d / n
    surv = np.cumprod(q)
    before = np.concatenate([[1.0], surv[:-1]])
    cif = np.cumsum(before * dc / n)
    return times, cif, surv


def _aj_end(stop, status, cause):
    _, cif, _ = aalen_johansen(stop, status, cause)
    return float(cif[-1]) if cif.size else 0.0


def _counterfactual_arrays(dataset: LandmarkDataset):
    """Unexposed-at-``l`` rows with follow-up censored at in-window exposure."""
    un = ~dataset.exposed
    stop = dataset.stop[un].copy()
    status = dataset.status[un].copy()
    ex = dataset.exposure_in_window[un]
    with np.errstate(invalid="ignore"):
        # an exposure at the event time itself does not censor the event
        cens = ex < stop
    stop[cens] = ex[cens]
    status[cens] = EventType.CENSORED
    return dataset.subject_ids[un], stop, status


def _cif_object(dataset, stop, status, cause):
    if len(stop) == 0:
        raise EmptyRiskSet(f"landmark {dataset.landmark}: empty risk set")
    times, cif, _ = aalen_johansen(stop, status, cause)
    curve = StepFunction(times, cif, 0.0)
    end = dataset.landmark + dataset.window
    return ConditionalCIF(dataset.landmark, dataset.window, int(cause), curve, float(curve(end)))


def conditional_cif(dataset: LandmarkDataset, cause: int = EventType.EVENT) -> ConditionalCIF:
    """Aalen-Johansen estimate of ``P(T <= t, X = cause | T > l)`` on ``(l, l+h]``."""
    return _cif_object(dataset, dataset.stop, dataset.status, cause)


def counterfactual_cif(dataset: LandmarkDataset, cause: int = EventType.EVENT) -> ConditionalCIF:
    """Cumulative incidence among the unexposed at ``l`` with exposure treated as censoring."""
    _, stop, status = _counterfactual_arrays(dataset)
    return _cif_object(dataset, stop, status, cause)


def window_survival(dataset: LandmarkDataset) -> float:
    """All-cause Kaplan-Meier survival at ``l + h`` given at risk at ``l``."""
    _, _, surv = aalen_johansen(dataset.stop, dataset.status, EventType.EVENT)
    return float(surv[-1]) if surv.size else 1.0


# ---------------------------------------------------------------------------
# leave-one-out

def leave_one_out_cif(stop, status, cause=1):
    """Leave-one-out Aalen-Johansen estimates at the end of follow-up, O(n log n).

    Removing subject ``i`` lowers the risk set by one at every event time
    up to its own stop time and removes its event from the count at that
    time; later factors are untouched. The estimate therefore splits into a
    modified prefix (cumulative arrays), one modified factor and the
    unmodified suffix, all computed without division by survival.
    """
    stop = np.asarray(stop, dtype=float)
    status = np.asarray(status)
    times, n, d, dc = _event_table(stop, status, cause)
    N = len(stop)
    if times.size == 0:
        return np.zeros(N)
    K = times.size
    q = 1.0 - d / n
    h = dc / n
    # suffix: G[k] = sum_{m >= k} prod_{k <= r < m} q_r h_m (0-based), G[K] = 0.
    # Only the last factor can vanish (everyone left dies), so dividing by the
    # prefix product before index k is safe.
    P = np.concatenate([[1.0], np.cumprod(q[:-1])])
    G = np.zeros(K + 1)
    G[:K] = np.cumsum((P * h)[::-1])[::-1] / P
    # prefix with one subject removed from every risk set
    nm = n - 1.0
    safe = nm > 0
    qm = np.where(safe, 1.0 - np.divide(d, nm, out=np.zeros(K), where=safe), 1.0)
    hm = np.where(safe, np.divide(dc, nm, out=np.zeros(K), where=safe), 0.0)
    Pm = np.concatenate([[1.0], np.cumprod(qm)])          # Pm[a] = prod_{k<a} qm
    Cm = np.concatenate([[0.0], np.cumsum(Pm[:-1] * hm)])  # Cm[a] = sum_{k<a} Pm[k] hm[k]

    a = np.searchsorted(times, stop, side="left")  # number of event times strictly before stop
    at_event = (a < K) & (times[np.minimum(a, K - 1)] == stop)
    out = Cm[a] + Pm[a] * G[a]
    if np.any(at_event):
        i = np.flatnonzero(at_event)
        k = a[i]
        n_star = n[k] - 1.0
        d_star = d[k] - (status[i] != 0)
        dc_star = dc[k] - (status[i] == cause)
        ok = n_star > 0
        h_star = np.where(ok, np.divide(dc_star, n_star, out=np.zeros(len(i)), where=ok), 0.0)
        q_star = np.where(ok, 1.0 - np.divide(d_star, n_star, out=np.zeros(len(i)), where=ok), 1.0)
        out[i] = Cm[k] + Pm[k] * (h_star + q_star * G[k + 1])
    return out


def leave_one_out_cif_naive(stop, status, cause=1):
    """Reference implementation: delete each row and recompute the estimator."""
    stop = np.asarray(stop, dtype=float)
    status = np.asarray(status)
    out = np.empty(len(stop))
    keep = np.ones(len(stop), dtype=bool)
    for i in range(len(stop)):
        keep[i] = False
        out[i] = _aj_end(stop[keep], status[keep], cause)
        keep[i] = True
    return out


def _pseudo(dataset, ids, stop, status, cause, naive):
    end = dataset.landmark + dataset.window
    if end > dataset.study_horizon:
        raise HorizonExceeded(f"window end {end} exceeds study horizon {dataset.study_horizon}")
    n = len(stop)
    if n == 0:
        raise EmptyRiskSet(f"landmark {dataset.landmark}: empty risk set")
    if n < 2:
        raise SingleSubject(f"landmark {dataset.landmark}: pseudo-values need at least two subjects")
    if not naive and np.all((status != 0) | (stop >= end)):
        # complete follow-up: the estimate is a proportion and the jackknife returns the indicators
        values = ((status == cause) & (stop <= end)).astype(float)
        return PseudoValueSet(dataset.landmark, dataset.window, ids, values, float(values.mean()), n)
    full = _aj_end(stop, status, cause)
    loo = (leave_one_out_cif_naive if naive else leave_one_out_cif)(stop, status, cause)
    values = n * full - (n - 1) * loo
    return PseudoValueSet(dataset.landmark, dataset.window, ids, values, full, n)


def pseudo_observations(dataset: LandmarkDataset, cause: int = EventType.EVENT,
                        naive: bool = False) -> PseudoValueSet:
    """Jackknife pseudo-values of the window outcome for every subject at risk at ``l``.

    Values are not clamped; they may fall outside [0, 1] under censoring.
    """
    return _pseudo(dataset, dataset.subject_ids, dataset.stop, dataset.status, cause, naive)


def pseudo_observations_counterfactual(dataset: LandmarkDataset, cause: int = EventType.EVENT,
                                       naive: bool = False) -> PseudoValueSet:
    """Pseudo-values for the outcome with exposure prevented during the window.

    Computed on the subjects unexposed at ``l``; those acquiring exposure in
    ``(l, l+h]`` are censored at the exposure time.
    """
    ids, stop, status = _counterfactual_arrays(dataset)
    return _pseudo(dataset, ids, stop, status, cause, naive)
