"""Exposure weighting and weighted cause-specific Cox models within a landmark window.

The window ``(l, l+h]`` is cut into intervals of length ``step``. The
exposure model is a discrete-time hazard over these intervals; the weight
attached to interval ``k`` is the product of the per-interval stabilized
factors of the intervals before it, constant once exposed. For the Cox
models the acquisition interval is split at the exposure time.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg

from .errors import (
    AllExposedAtBaseline,
    GridMismatch,
    NoCases,
    NotConverged,
    Separation,
)
from .event_data import EventType, LandmarkDataset, ValidatedCohort
from .glm import build_design, check_rank, expand_covariates, fit_binomial
from .survival import StepFunction

EXPOSURE = "exposed"
COX_SCORE_TOL = 1e-8
COX_ETA_MAX = 30.0


@dataclass(frozen=True, eq=False)
class PersonTimeTable:
    """Long-format person-time rows, sorted by subject then interval.

    ``subject`` indexes rows of the source landmark dataset. ``status`` is the
    event type at ``stop`` (0 if none in the interval). ``covariates`` hold the
    landmark values ``Z_l`` (fixed over the window) and ``time_varying`` the
    (lagged) current values at each interval start.
    """

    landmark: float
    window: float
    step: float
    subject: np.ndarray
    subject_ids: np.ndarray
    interval: np.ndarray
    start: np.ndarray
    stop: np.ndarray
    exposed: np.ndarray
    acquired: np.ndarray
    status: np.ndarray
    covariates: Mapping[str, np.ndarray]
    time_varying: Mapping[str, np.ndarray]
    covariate_schema: Mapping[str, str]

    def __len__(self):
        return len(self.subject)

    def select(self, mask):
        mask = np.asarray(mask)
        return PersonTimeTable(
            self.landmark, self.window, self.step, self.subject[mask], self.subject_ids[mask],
            self.interval[mask], self.start[mask], self.stop[mask], self.exposed[mask],
            self.acquired[mask], self.status[mask],
            {k: v[mask] for k, v in self.covariates.items()},
            {k: v[mask] for k, v in self.time_varying.items()},
            self.covariate_schema)


def expand_person_time(dataset: LandmarkDataset, cohort: ValidatedCohort | None = None,
                       step: float = 1.0, time_varying: Sequence[str] = (),
                       lag: float = 0.0, split_at_exposure: bool = True) -> PersonTimeTable:
    """Expand a landmark dataset into one row per subject and interval.

    Parameters
    ----------
    dataset : LandmarkDataset
    cohort : ValidatedCohort, optional
        Source of the covariate panel for ``time_varying``; without it those
        covariates are held at their landmark values.
    step : float
        Interval length; must divide the window.
    time_varying : names
        Covariates evaluated at ``start - lag`` of every interval.
    lag : float
        Lag applied to the time-varying covariates.
    split_at_exposure : bool
        Split an acquisition interval at the exposure time so the Cox
        models see the exact switch. The exposure model still has one
        unexposed row per interval.
    """
    if not step > 0:
        raise ValueError("step must be > 0")
    l, h = dataset.landmark, dataset.window
    K = h / step
    if abs(K - round(K)) > 1e-9:
        raise ValueError(f"step {step} does not divide the window {h}")
    K = int(round(K))
    n_int = np.clip(np.ceil((dataset.stop - l) / step - 1e-12).astype(np.int64), 1, K)
    subj = np.repeat(np.arange(len(dataset)), n_int)
    offsets = np.concatenate([[0], np.cumsum(n_int)[:-1]])
    k = np.arange(len(subj)) - np.repeat(offsets, n_int) + 1
    start = l + (k - 1) * step
    end = l + k * step
    sstop = dataset.stop[subj]
    stop = np.minimum(end, sstop)
    last = k == n_int[subj]
    status = np.where(last, dataset.status[subj], 0).astype(np.int8)
    ex_l = dataset.exposed[subj]
    ew = dataset.exposure_in_window[subj]
    with np.errstate(invalid="ignore"):
        exposed = ex_l | (ew <= start)
        acquired = ~exposed & (ew > start) & (ew <= end)
    if split_at_exposure:
        # close the acquisition row at the exposure time; the rest of the
        # interval becomes an exposed row carrying the interval's outcome
        with np.errstate(invalid="ignore"):
            cut = acquired & (ew < stop)
        rep = np.where(cut, 2, 1)
        pos = np.repeat(np.arange(len(subj)), rep)
        second = np.zeros(len(pos), dtype=bool)
        second[np.cumsum(rep)[cut] - 1] = True
        first = np.repeat(cut, rep) & ~second
        subj, k = subj[pos], k[pos]
        ew = ew[pos]
        new_start = np.where(second, ew, start[pos])
        new_stop = np.where(first, ew, stop[pos])
        status = np.where(first, 0, status[pos]).astype(np.int8)
        exposed = exposed[pos] | second
        acquired = acquired[pos] & ~second
        start, stop = new_start, new_stop
    covs = {name: v[subj] for name, v in dataset.covariates.items()}
    tv = {}
    for name in time_varying:
        if cohort is not None and cohort.panel is not None and name in cohort.panel.values:
            tv[name] = cohort.covariates_at(l + (k - 1) * step, [name], lag=lag, positions=dataset.positions[subj])[name]
        else:
            tv[name] = dataset.covariates[name][subj]
    return PersonTimeTable(l, h, float(step), subj, dataset.subject_ids[subj], k, start, stop,
                           exposed, acquired, status, covs, tv, dict(dataset.covariate_schema))


@dataclass(frozen=True)
class SubjectWeights:
    """Per person-time row: cumulative stabilized weight entering the interval."""

    weights: np.ndarray
    factors: np.ndarray
    truncated: np.ndarray
    bounds: tuple[float, float] | None
    untruncated: np.ndarray


def _interval_design(interval, degree):
    cols = {}
    if degree >= 1:
        cols["interval"] = interval.astype(float)
    if degree >= 2:
        cols["interval_sq"] = interval.astype(float) ** 2
    return cols


def estimate_weights(table: PersonTimeTable, confounders: Sequence[str] = (),
                     truncation_percentile: float | None = 99.0) -> SubjectWeights:
    """Stabilized inverse-probability-of-exposure weights.

    Pooled logistic models for the discrete-time exposure hazard among rows
    still unexposed: the denominator uses interval index (linear and
    quadratic) plus the current ``confounders``; the numerator uses the
    interval terms only. ``truncation_percentile`` clips the weights
    symmetrically at the ``(100 - p)``-th and ``p``-th percentiles.
    """
    n = len(table)
    risk = ~table.exposed
    factors = np.ones(n)
    if n and not risk.any():
        raise AllExposedAtBaseline(f"landmark {table.landmark}: every subject is exposed at the landmark")
    acq = table.acquired[risk]
    if acq.any():
        interval = table.interval[risk]
        degree = min(2, len(np.unique(interval)) - 1)
        tcols = _interval_design(interval, degree)
        num = fit_binomial(build_design(tcols, n=len(interval)), acq.astype(float), link="logit")
        p_num = _logit_predict(num, build_design(tcols, n=len(interval)))
        if confounders:
            data = {c: table.time_varying.get(c, table.covariates.get(c))[risk] for c in confounders}
            cols, arrs, _ = expand_covariates(data, confounders, table.covariate_schema)
            dcols = {**tcols, **dict(zip(cols, arrs))}
            den_design = build_design(dcols, n=len(interval))
            den = fit_binomial(den_design, acq.astype(float), link="logit")
            p_den = _logit_predict(den, den_design)
        else:
            p_den = p_num
        f = np.where(acq, p_num / p_den, (1.0 - p_num) / (1.0 - p_den))
        factors[risk] = f
    # exclusive cumulative product within subject (rows are subject-major)
    logf = np.log(factors)
    csum = np.cumsum(logf)
    first = np.r_[True, table.subject[1:] != table.subject[:-1]]
    starts = np.flatnonzero(first)
    counts = np.diff(np.r_[starts, n])
    base = np.repeat(csum[starts] - logf[starts], counts)
    weights = np.exp(csum - logf - base)
    raw = weights.copy()
    truncated = np.zeros(n, dtype=bool)
    bounds = None
    if truncation_percentile is not None and n:
        p = float(truncation_percentile)
        if not 50 <= p <= 100:
            raise ValueError("truncation_percentile must be in [50, 100]")
        lo, hi = np.percentile(weights, [100 - p, p])
        bounds = (float(lo), float(hi))
        truncated = (weights < lo) | (weights > hi)
        weights = np.clip(weights, lo, hi)
    return SubjectWeights(weights, factors, truncated, bounds, raw)


def _logit_predict(fit, design):
    from scipy.special import expit
    return expit(design.values @ fit.params)


# ---------------------------------------------------------------------------
# weighted Cox regression

@dataclass(frozen=True)
class CoxFit:
    cause: int
    columns: tuple[str, ...]
    params: np.ndarray
    covariance: np.ndarray
    naive_covariance: np.ndarray
    baseline_cumhaz: StepFunction
    converged: bool
    iterations: int
    max_abs_score: float
    loglik: float
    landmark: float
    window: float
    covariate_names: tuple[str, ...] = ()
    levels: Mapping[str, Sequence] | None = None

    @property
    def coefficients(self) -> dict[str, float]:
        return dict(zip(self.columns, map(float, self.params)))

    @property
    def baseline_increments(self):
        v = self.baseline_cumhaz.values
        return self.baseline_cumhaz.times, np.diff(np.r_[0.0, v])


class _RiskSets:
    """Sorted-array machinery for counting-process risk-set sums."""

    def __init__(self, start, stop, event, w):
        self.start, self.stop, self.event, self.w = start, stop, event, w
        ev = event & (w > 0)
        self.times = np.unique(stop[ev])
        idx = np.searchsorted(self.times, stop[ev])
        self.ev_rows = np.flatnonzero(ev)
        self.ev_idx = idx
        self.dW = np.bincount(idx, weights=w[ev], minlength=self.times.size)
        self.stop_order = np.argsort(stop, kind="stable")
        self.start_order = np.argsort(start, kind="stable")
        self.a_idx = np.searchsorted(stop[self.stop_order], self.times, side="left")
        self.b_idx = np.searchsorted(start[self.start_order], self.times, side="left")

    def sums(self, v):
        """``sum over rows at risk at each event time of v`` (v: rows x ...)."""
        # extended precision: the difference of two long cumulative sums
        # otherwise loses the digits the score tolerance needs
        v = np.asarray(v, dtype=np.longdouble)

        def revcum(order):
            c = np.cumsum(v[order][::-1], axis=0)[::-1]
            return np.concatenate([c, np.zeros((1,) + c.shape[1:], dtype=c.dtype)], axis=0)
        A = revcum(self.stop_order)[self.a_idx]
        B = revcum(self.start_order)[self.b_idx]
        return (A - B).astype(float)


def _cox_terms(rs: _RiskSets, X, beta, need_info=True):
    eta = X @ beta
    r = rs.w * np.exp(eta)
    S0 = rs.sums(r)
    if np.any(S0 <= 0):
        raise ValueError("empty risk set at an event time")
    ll = float(np.sum(rs.w[rs.ev_rows] * eta[rs.ev_rows]) - np.sum(rs.dW * np.log(S0)))
    p = X.shape[1]
    if p == 0:
        return ll, np.zeros(0), np.zeros((0, 0)), S0, np.zeros((len(S0), 0))
    S1 = rs.sums(r[:, None] * X)
    xbar = S1 / S0[:, None]
    score = rs.w[rs.ev_rows] @ X[rs.ev_rows] - rs.dW @ xbar
    info = None
    if need_info:
        S2 = rs.sums(r[:, None, None] * X[:, :, None] * X[:, None, :])
        info = np.einsum("m,mij->ij", rs.dW, S2 / S0[:, None, None] - xbar[:, :, None] * xbar[:, None, :])
    return ll, score, info, S0, xbar


def cox_partial_loglik(start, stop, event, X, beta, weights=None) -> float:
    """Weighted Breslow log partial likelihood."""
    X = np.asarray(X, dtype=float).reshape(len(stop), -1)
    w = np.ones(len(stop)) if weights is None else np.asarray(weights, dtype=float)
    rs = _RiskSets(np.asarray(start, float), np.asarray(stop, float), np.asarray(event, bool), w)
    return _cox_terms(rs, X, np.asarray(beta, dtype=float), need_info=False)[0]


def cox_score(start, stop, event, X, beta, weights=None) -> np.ndarray:
    X = np.asarray(X, dtype=float).reshape(len(stop), -1)
    w = np.ones(len(stop)) if weights is None else np.asarray(weights, dtype=float)
    rs = _RiskSets(np.asarray(start, float), np.asarray(stop, float), np.asarray(event, bool), w)
    return _cox_terms(rs, X, np.asarray(beta, dtype=float), need_info=False)[1]


def fit_cox(start, stop, event, X, weights=None, groups=None, columns=None, max_iter=100,
            landmark=float("nan"), window=float("nan"), cause=EventType.EVENT):
    """Weighted Cox model for counting-process data by damped Newton-Raphson.

    Breslow ties; baseline cumulative hazard by the weighted Breslow
    estimator; sandwich covariance clustered on ``groups`` (rows when None).
    """
    start = np.asarray(start, dtype=float)
    stop = np.asarray(stop, dtype=float)
    event = np.asarray(event, dtype=bool)
    n = len(stop)
    X = np.asarray(X, dtype=float).reshape(n, -1)
    p = X.shape[1]
    columns = tuple(columns) if columns is not None else tuple(f"x{j}" for j in range(p))
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    if np.any(stop <= start):
        raise ValueError("every row needs start < stop")
    if not np.any(event & (w > 0)):
        raise NoCases("no events of this cause")
    rs = _RiskSets(start, stop, event, w)
    if p:
        # only rows at risk at some event time carry information
        check_rank(X - np.average(X, axis=0, weights=w), columns, w)
    center = np.average(X, axis=0, weights=w) if p else np.zeros(0)
    Xc = X - center
    beta = np.zeros(p)
    ll, score, info, S0, xbar = _cox_terms(rs, Xc, beta)
    info0 = np.max(np.linalg.eigvalsh(info)) if p else 0.0
    it = 0
    converged = p == 0 or np.max(np.abs(score)) < COX_SCORE_TOL
    while not converged and it < max_iter:
        it += 1
        try:
            step = scipy.linalg.solve(info, score, assume_a="pos")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            step = np.linalg.lstsq(info, score, rcond=None)[0]
        big = np.max(np.abs(step))
        if big > 5.0:
            step *= 5.0 / big
        t = 1.0
        for _ in range(60):
            nb = beta + t * step
            nll = _cox_terms(rs, Xc, nb, need_info=False)[0]
            if np.isfinite(nll) and nll >= ll - 1e-12 * max(1.0, abs(ll)):
                break
            t *= 0.5
        else:
            break
        beta = nb
        ll, score, info, S0, xbar = _cox_terms(rs, Xc, beta)
        spread = np.ptp(Xc @ beta) if n else 0.0
        if spread > COX_ETA_MAX:
            raise Separation(f"Cox linear predictor spread {spread:.1f} > {COX_ETA_MAX}; "
                             "monotone likelihood")
        converged = np.max(np.abs(score)) < COX_SCORE_TOL
    if converged and p and it:
        # one polishing step so the solution does not depend on the weight scale
        try:
            nb = beta + scipy.linalg.solve(info, score, assume_a="pos")
            terms = _cox_terms(rs, Xc, nb)
            if np.max(np.abs(terms[1])) <= np.max(np.abs(score)):
                beta = nb
                ll, score, info, S0, xbar = terms
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            pass
    max_score = float(np.max(np.abs(score))) if p else 0.0
    if not converged:
        raise NotConverged(it, max_score, "Cox model")
    if p and np.min(np.linalg.eigvalsh(info)) < 1e-7 * info0:
        # the score vanishes only at infinity: information collapsed along the way
        raise Separation("Cox information collapsed during fitting; monotone likelihood")

    naive = np.linalg.inv(info) if p else np.zeros((0, 0))
    if p:
        # score residuals (Lin-Wei), centred covariates
        r = w * np.exp(Xc @ beta)
        dL = rs.dW / S0
        C0 = np.concatenate([[0.0], np.cumsum(dL)])
        C1 = np.concatenate([np.zeros((1, p)), np.cumsum(xbar * dL[:, None], axis=0)])
        hi = np.searchsorted(rs.times, stop, side="right")
        lo = np.searchsorted(rs.times, start, side="right")
        comp = r[:, None] * (Xc * (C0[hi] - C0[lo])[:, None] - (C1[hi] - C1[lo]))
        U = -comp
        U[rs.ev_rows] += w[rs.ev_rows, None] * (Xc[rs.ev_rows] - xbar[rs.ev_idx])
        if groups is not None:
            _, g = np.unique(np.asarray(groups), return_inverse=True)
            Ug = np.zeros((g.max() + 1, p))
            np.add.at(Ug, g.ravel(), U)
            U = Ug
        cov = naive @ (U.T @ U) @ naive
        cov = 0.5 * (cov + cov.T)
    else:
        cov = naive
    # baseline at x = 0 on the original scale
    shift = float(center @ beta) if p else 0.0
    dLambda0 = rs.dW / (S0 * np.exp(shift))
    base = StepFunction(rs.times, np.cumsum(dLambda0), 0.0)
    return CoxFit(cause=int(cause), columns=columns, params=beta, covariance=cov,
                  naive_covariance=naive, baseline_cumhaz=base, converged=True, iterations=it,
                  max_abs_score=max_score, loglik=ll, landmark=float(landmark), window=float(window))


def _cox_design(table_covs, names, schema, exposed=None, levels=None):
    cols, arrs, used = expand_covariates(table_covs, names, schema, levels)
    if exposed is not None:
        cols = [EXPOSURE] + cols
        arrs = [np.asarray(exposed, dtype=float)] + arrs
    n = len(exposed) if exposed is not None else (len(arrs[0]) if arrs else 0)
    X = np.column_stack(arrs) if arrs else np.zeros((n, 0))
    return X, tuple(cols), used


def fit_weighted_cox(table: PersonTimeTable, weights: SubjectWeights | np.ndarray | None,
                     cause: int, covariates: Sequence[str] = (EXPOSURE,)) -> CoxFit:
    """Weighted cause-specific Cox model on person-time rows.

    ``covariates`` may include ``"exposed"`` (current exposure status) and
    names of landmark covariates.
    """
    w = getattr(weights, "weights", weights)
    w = np.ones(len(table)) if w is None else np.asarray(w, dtype=float)
    use_exp = EXPOSURE in covariates
    others = [c for c in covariates if c != EXPOSURE]
    X, cols, levels = _cox_design(table.covariates, others, table.covariate_schema,
                                  table.exposed if use_exp else None)
    if not use_exp and X.shape[0] != len(table):
        X = np.zeros((len(table), 0))
    fit = fit_cox(table.start, table.stop, table.status == cause, X, weights=w,
                  groups=table.subject_ids, columns=cols, landmark=table.landmark,
                  window=table.window, cause=cause)
    return _with_names(fit, tuple(others), levels)


def _with_names(fit, names, levels):
    from dataclasses import replace
    return replace(fit, covariate_names=names, levels=levels)


def landmark_rows_table(dataset: LandmarkDataset) -> PersonTimeTable:
    """One person-time row per subject spanning ``(l, stop]`` (no splitting)."""
    n = len(dataset)
    l = dataset.landmark
    return PersonTimeTable(l, dataset.window, dataset.window, np.arange(n), dataset.subject_ids,
                           np.ones(n, dtype=np.int64), np.full(n, l), dataset.stop.copy(),
                           dataset.exposed.copy(), np.zeros(n, dtype=bool), dataset.status.copy(),
                           dict(dataset.covariates), {}, dict(dataset.covariate_schema))


def _subject_design(fit: CoxFit, dataset: LandmarkDataset, exposure_value):
    exposed = None
    if EXPOSURE in fit.columns:
        exposed = (dataset.exposed.astype(float) if exposure_value is None
                   else np.full(len(dataset), float(exposure_value)))
    X, cols, _ = _cox_design(dataset.covariates, list(fit.covariate_names), dataset.covariate_schema,
                             exposed, fit.levels)
    if X.shape[0] != len(dataset):
        X = np.zeros((len(dataset), 0))
    if cols != fit.columns:
        raise GridMismatch(f"design columns {cols} do not match fitted columns {fit.columns}")
    return X


def subject_cifs(fit_event: CoxFit, fit_competing: CoxFit | None, dataset: LandmarkDataset,
                 exposure_value: float | None = 0.0):
    """Per-subject (CIF event, CIF competing, survival) at ``l + h`` by product integration."""
    fits = [f for f in (fit_event, fit_competing) if f is not None]
    for f in fits:
        if (f.landmark, f.window) != (dataset.landmark, dataset.window):
            raise GridMismatch(f"fit for landmark {f.landmark}, window {f.window} used on "
                               f"landmark {dataset.landmark}, window {dataset.window}")
    end = dataset.landmark + dataset.window
    grid = np.unique(np.concatenate([f.baseline_cumhaz.times for f in fits]))
    grid = grid[grid <= end]

    def increments(f):
        if f is None:
            return np.zeros(grid.size)
        t, dl = f.baseline_increments
        out = np.zeros(grid.size)
        pos = np.searchsorted(grid, t)
        keep = t <= end
        out[pos[keep]] = dl[keep]
        return out

    d1, d2 = increments(fit_event), increments(fit_competing)
    X1 = _subject_design(fit_event, dataset, exposure_value)
    X2 = _subject_design(fit_competing, dataset, exposure_value) if fit_competing else None
    key = np.column_stack([X1] + ([X2] if X2 is not None else []))
    if key.shape[1] == 0:
        key = np.zeros((len(dataset), 1))
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    inv = inv.ravel()
    p1 = X1.shape[1]
    r1 = np.exp(uniq[:, :p1] @ fit_event.params) if p1 else np.ones(len(uniq))
    if X2 is not None and X2.shape[1]:
        r2 = np.exp(uniq[:, p1:] @ fit_competing.params)
    else:
        r2 = np.ones(len(uniq))
    lam1 = r1[:, None] * d1[None, :]
    lam2 = r2[:, None] * d2[None, :]
    factors = np.clip(1.0 - lam1 - lam2, 0.0, None)
    surv = np.cumprod(factors, axis=1)
    before = np.concatenate([np.ones((len(uniq), 1)), surv[:, :-1]], axis=1)
    cif1 = np.sum(before * lam1, axis=1)
    cif2 = np.sum(before * lam2, axis=1)
    s_end = surv[:, -1] if grid.size else np.ones(len(uniq))
    return cif1[inv], cif2[inv], s_end[inv]


def counterfactual_window_risk(fit_event: CoxFit, fit_competing: CoxFit | None,
                               dataset: LandmarkDataset, exposure_value: float | None = 0.0) -> float:
    """Standardised window risk of the event with exposure set to ``exposure_value``.

    Averages subject-specific cumulative incidences over everyone at risk at
    the landmark. ``exposure_value=None`` keeps each subject's factual
    exposure at ``l``. ``fit_competing=None`` means no competing hazard.
    """
    cif1, _, _ = subject_cifs(fit_event, fit_competing, dataset, exposure_value)
    return float(np.mean(cif1))
