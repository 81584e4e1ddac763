"""Binomial-response GLMs with log and logit links.

The fitter accepts real-valued responses (jackknife pseudo-values included)
and solves the usual binomial estimating equations by iteratively reweighted
least squares with step-halving. Log-link iterates are kept strictly inside
the unit interval.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Literal, Mapping, Sequence

import numpy as np
import scipy.linalg
from scipy.special import expit

from .errors import (
    CensoringPresent,
    DegenerateInputs,
    MissingPredictor,
    NoCases,
    NotConverged,
    RankDeficientDesign,
    Separation,
)
from .event_data import CATEGORICAL, LandmarkDataset

INTERCEPT = "intercept"
SCORE_TOL = 1e-8
DEVIANCE_RTOL = 1e-10
MU_MAX = 1.0 - 1e-10
ETA_MAX = 30.0
RANK_RTOL = 1e-10

Link = Literal["log", "logit"]


class ClampWarning(UserWarning):
    """A log-link prediction fell outside [0, 1] and was clamped."""


@dataclass(frozen=True)
class DesignMatrix:
    values: np.ndarray
    columns: tuple[str, ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[1] != len(self.columns):
            raise ValueError("design values must be (n, len(columns))")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "columns", tuple(self.columns))

    @property
    def n(self):
        return self.values.shape[0]


def expand_covariates(data: Mapping[str, np.ndarray], names: Sequence[str],
                      schema: Mapping[str, str], levels: Mapping[str, Sequence] | None = None):
    """Numeric columns as-is; categorical ones as indicators (first sorted level dropped).

    Returns ``(columns, arrays, levels)``; pass ``levels`` back in to reuse a
    coding on new data.
    """
    cols, arrs, used = [], [], {}
    for name in names:
        v = np.asarray(data[name])
        if schema.get(name) == CATEGORICAL:
            if any(x is None for x in v):
                raise ValueError(f"covariate {name!r} has missing values")
            lv = list(levels[name]) if levels and name in levels else sorted({str(x) for x in v})
            used[name] = lv
            sv = np.array([str(x) for x in v])
            for level in lv[1:]:
                cols.append(f"{name}[{level}]")
                arrs.append((sv == level).astype(float))
        else:
            v = v.astype(float)
            if np.any(np.isnan(v)):
                raise ValueError(f"covariate {name!r} has missing values")
            cols.append(name)
            arrs.append(v)
    return cols, arrs, used


def build_design(columns: Mapping[str, np.ndarray], intercept: bool = True, n: int | None = None) -> DesignMatrix:
    names, arrs = [], []
    if intercept:
        if n is None:
            n = len(next(iter(columns.values())))
        names.append(INTERCEPT)
        arrs.append(np.ones(n))
    for k, v in columns.items():
        names.append(k)
        arrs.append(np.asarray(v, dtype=float))
    return DesignMatrix(np.column_stack(arrs) if arrs else np.zeros((n or 0, 0)), tuple(names))


@dataclass(frozen=True)
class GlmFit:
    link: str
    columns: tuple[str, ...]
    params: np.ndarray
    covariance: np.ndarray
    converged: bool
    iterations: int
    max_abs_score: float
    loglik: float
    n: int
    robust_covariance: np.ndarray | None = field(default=None, repr=False)

    @property
    def coefficients(self) -> dict[str, float]:
        return dict(zip(self.columns, map(float, self.params)))

    def se(self, robust=False):
        cov = self.robust_covariance if robust and self.robust_covariance is not None else self.covariance
        return np.sqrt(np.clip(np.diag(cov), 0, None))

    def wald(self, names: Sequence[str], robust=True):
        """Joint Wald chi-square statistic, degrees of freedom and p-value for ``names``."""
        from scipy.stats import chi2

        idx = [self.columns.index(n) for n in names]
        cov = self.robust_covariance if robust and self.robust_covariance is not None else self.covariance
        b = self.params[idx]
        v = cov[np.ix_(idx, idx)]
        stat = float(b @ np.linalg.solve(v, b))
        return stat, len(idx), float(chi2.sf(stat, len(idx)))


def _mean(link, eta):
    return np.exp(eta) if link == "log" else expit(eta)


def _loglik(y, mu, w):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = y * np.log(mu) + (1.0 - y) * np.log1p(-mu)
    t = np.where(w > 0, t, 0.0)
    return float(np.sum(w * t))


def _score_terms(link, y, mu):
    """Derivative of the per-row log-likelihood with respect to the linear predictor."""
    return (y - mu) if link == "logit" else (y - mu) / (1.0 - mu)


def _fisher_weights(link, mu):
    return mu * (1.0 - mu) if link == "logit" else mu / (1.0 - mu)


def _observed_weights(link, y, mu):
    return mu * (1.0 - mu) if link == "logit" else mu * (1.0 - y) / (1.0 - mu) ** 2


def check_rank(X: np.ndarray, columns: Sequence[str], w: np.ndarray | None = None):
    """Raise :class:`RankDeficientDesign` naming a collinear column.

    Pivoted QR on the column-normalised (weighted) design with relative
    tolerance ``RANK_RTOL``.
    """
    if X.shape[1] == 0:
        return
    A = X if w is None else X * np.sqrt(w)[:, None]
    norms = np.linalg.norm(A, axis=0)
    for j, nrm in enumerate(norms):
        if nrm == 0:
            raise RankDeficientDesign(columns[j], f"column {columns[j]!r} is identically zero")
    if X.shape[0] < X.shape[1]:
        raise RankDeficientDesign(columns[-1], f"{X.shape[0]} rows < {X.shape[1]} columns")
    _, R, piv = scipy.linalg.qr(A / norms, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > RANK_RTOL * d[0]))
    if rank < X.shape[1]:
        raise RankDeficientDesign(columns[piv[rank]])


def _collapse(X, y, w):
    """Merge rows with identical (covariates, response); exact for the likelihood."""
    key = np.column_stack([X, y])
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    if len(uniq) > 0.5 * len(y):
        return X, y, w
    ws = np.bincount(inv.ravel(), weights=w, minlength=len(uniq))
    return uniq[:, :-1], uniq[:, -1], ws


def fit_binomial(design: DesignMatrix, response, weights=None, link: Link = "log",
                 groups=None, robust: bool = False, max_iter: int = 200) -> GlmFit:
    """Maximum-likelihood binomial GLM by IRLS with step-halving.

    Parameters
    ----------
    design : DesignMatrix
    response : array of reals
        0/1 outcomes or real-valued surrogates (pseudo-values may fall
        outside [0, 1]).
    weights : array, optional
        Nonnegative prior weights, default 1.
    link : {"log", "logit"}
    groups : array, optional
        Cluster labels for a sandwich covariance (``robust_covariance``).
    robust : bool
        Compute a row-level sandwich covariance when ``groups`` is not given.

    Raises
    ------
    RankDeficientDesign, Separation, NotConverged
    """
    if link not in ("log", "logit"):
        raise ValueError(f"unsupported link {link!r}")
    X0 = design.values
    y0 = np.asarray(response, dtype=float)
    n, p = X0.shape
    if y0.shape != (n,):
        raise ValueError("response length does not match design")
    if not np.all(np.isfinite(y0)):
        raise ValueError("response must be finite")
    w0 = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if w0.shape != (n,) or np.any(w0 < 0) or not np.all(np.isfinite(w0)):
        raise ValueError("weights must be finite and nonnegative")
    check_rank(X0, design.columns, w0)

    want_robust = robust or groups is not None
    X, y, w = (X0, y0, w0) if want_robust else _collapse(X0, y0, w0)

    ybar = float(np.sum(w * y) / np.sum(w))
    if link == "logit" and not 0 < ybar < 1:
        raise Separation(f"weighted mean response {ybar} is on the boundary; logit MLE does not exist")
    if link == "log" and not 0 < ybar < 1:
        raise Separation(f"weighted mean response {ybar} is outside (0, 1); log-binomial MLE does not exist")
    start = np.log(ybar) if link == "log" else np.log(ybar / (1 - ybar))
    beta = np.linalg.lstsq(X, np.full(len(y), start), rcond=None)[0]
    eta = X @ beta
    if link == "log" and np.any(eta >= np.log(MU_MAX)):
        beta = np.zeros(p)
        if INTERCEPT in design.columns:
            beta[design.columns.index(INTERCEPT)] = start
        eta = X @ beta
    mu = _mean(link, eta)
    ll = _loglik(y, mu, w)

    it = 0
    converged = False
    score = X.T @ (w * _score_terms(link, y, mu))
    while it < max_iter:
        if np.max(np.abs(score)) < SCORE_TOL:
            converged = True
            break
        it += 1
        W = w * _fisher_weights(link, mu)
        info = (X * W[:, None]).T @ X
        try:
            step = scipy.linalg.solve(info, score, assume_a="pos")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            step = np.linalg.lstsq(info, score, rcond=None)[0]
        t = 1.0
        for _ in range(60):
            nb = beta + t * step
            neta = X @ nb
            if link == "log" and np.any(neta >= np.log(MU_MAX)):
                t *= 0.5
                continue
            nmu = _mean(link, neta)
            nll = _loglik(y, nmu, w)
            if np.isfinite(nll) and nll >= ll - 1e-12 * max(1.0, abs(ll)):
                break
            t *= 0.5
        else:
            break
        dev_change = abs(nll - ll) / (abs(ll) + 0.1)
        beta, eta, mu, ll = nb, neta, nmu, nll
        score = X.T @ (w * _score_terms(link, y, mu))
        if np.max(np.abs(eta)) > ETA_MAX:
            raise Separation(f"linear predictor reached |eta| = {np.max(np.abs(eta)):.1f} "
                             f"(> {ETA_MAX}); coefficients diverge")
        if dev_change < DEVIANCE_RTOL and np.max(np.abs(score)) < SCORE_TOL:
            converged = True
            break
    if converged and p:
        # polish with full Newton steps so the optimum does not depend on the stopping point
        for _ in range(3):
            Wobs = w * _observed_weights(link, y, mu)
            try:
                nb = beta + scipy.linalg.solve((X * Wobs[:, None]).T @ X, score, assume_a="pos")
            except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError):
                break
            neta = X @ nb
            if link == "log" and np.any(neta >= np.log(MU_MAX)):
                break
            nmu = _mean(link, neta)
            nscore = X.T @ (w * _score_terms(link, y, nmu))
            if not np.max(np.abs(nscore)) < np.max(np.abs(score)):
                break
            beta, eta, mu, score = nb, neta, nmu, nscore
            ll = _loglik(y, mu, w)
    max_score = float(np.max(np.abs(score))) if p else 0.0
    if not converged:
        if np.max(np.abs(eta)) > ETA_MAX - 5:
            raise Separation("coefficients diverge; fitted probabilities approach 0 or 1")
        what = "binomial GLM"
        if link == "log" and np.max(mu) > 1.0 - 1e-4:
            what += " (log-link maximum on the boundary, a fitted probability reaches 1)"
        raise NotConverged(it, max_score, what)

    Wobs = w * _observed_weights(link, y, mu)
    info = (X * Wobs[:, None]).T @ X
    cov = _safe_inverse(info)
    if cov is None or np.any(np.diag(cov) < 0):
        # pseudo-value responses outside [0, 1] can make the observed information indefinite
        info = (X * (w * _fisher_weights(link, mu))[:, None]).T @ X
        cov = _safe_inverse(info)
    cov = 0.5 * (cov + cov.T)

    rob = None
    if want_robust:
        U = X * (w * _score_terms(link, y, mu))[:, None]
        if groups is not None:
            _, g = np.unique(np.asarray(groups), return_inverse=True)
            Ug = np.zeros((g.max() + 1, p))
            np.add.at(Ug, g.ravel(), U)
            U = Ug
        meat = U.T @ U
        rob = cov @ meat @ cov
        rob = 0.5 * (rob + rob.T)

    return GlmFit(link=link, columns=design.columns, params=beta, covariance=cov,
                  converged=True, iterations=it, max_abs_score=max_score, loglik=ll,
                  n=n, robust_covariance=rob)


def _safe_inverse(a):
    try:
        return np.linalg.inv(a)
    except np.linalg.LinAlgError:
        return None


def binomial_loglik(design: DesignMatrix, response, params, weights=None, link: Link = "log") -> float:
    X = design.values
    y = np.asarray(response, dtype=float)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    return _loglik(y, _mean(link, X @ np.asarray(params, dtype=float)), w)


def binomial_score(design: DesignMatrix, response, params, weights=None, link: Link = "log") -> np.ndarray:
    X = design.values
    y = np.asarray(response, dtype=float)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    mu = _mean(link, X @ np.asarray(params, dtype=float))
    return X.T @ (w * _score_terms(link, y, mu))


def predict_linear(fit: GlmFit, row: Mapping[str, float]) -> float:
    missing = [c for c in fit.columns if c != INTERCEPT and c not in row]
    if missing:
        raise MissingPredictor(f"row lacks predictor(s) {missing}")
    x = np.array([float(row.get(c, 1.0)) if c == INTERCEPT else float(row[c]) for c in fit.columns])
    return float(x @ fit.params)


def predict_prob(fit: GlmFit, row: Mapping[str, float] | None = None) -> float:
    """Inverse link of the linear predictor for one covariate row.

    The intercept is filled in automatically. Log-link values above one are
    clamped with a :class:`ClampWarning`.
    """
    eta = predict_linear(fit, row or {})
    if fit.link == "logit":
        return float(expit(eta))
    p = float(np.exp(eta))
    if p > 1.0:
        warnings.warn(f"log-link prediction {p:.6g} clamped to 1", ClampWarning, stacklevel=2)
        p = 1.0
    return p


# ---------------------------------------------------------------------------
# landmark-level models

def _require_groups(dataset: LandmarkDataset):
    n1 = int(dataset.exposed.sum())
    if n1 == 0 or n1 == len(dataset):
        raise DegenerateInputs(f"landmark {dataset.landmark}: need both exposed and unexposed subjects "
                               f"(exposed {n1} of {len(dataset)})")


def risk_ratio_fit(dataset: LandmarkDataset, adjustment: Sequence[str] = (), response=None) -> GlmFit:
    """Log-binomial model of the window outcome on exposure at ``l`` and covariates at ``l``."""
    _require_groups(dataset)
    if response is None:
        if dataset.has_censoring:
            raise CensoringPresent(f"landmark {dataset.landmark}: censored rows present; use pseudo-values")
        response = dataset.event
    cols, arrs, _ = expand_covariates(dataset.covariates, adjustment, dataset.covariate_schema)
    design = build_design({"exposed": dataset.exposed.astype(float), **dict(zip(cols, arrs))},
                          n=len(dataset))
    return fit_binomial(design, response, link="log")


def risk_ratio_at_landmark(dataset: LandmarkDataset, adjustment: Sequence[str] = (),
                           response=None) -> tuple[float, float]:
    """Risk ratio ``exp(beta_exposed)`` and the standard error of its log.

    With pseudo-value ``response`` the standard error is the row-level
    sandwich; otherwise it is model based.
    """
    if response is None:
        fit = risk_ratio_fit(dataset, adjustment)
        se = fit.se()
    else:
        _require_groups(dataset)
        cols, arrs, _ = expand_covariates(dataset.covariates, adjustment, dataset.covariate_schema)
        design = build_design({"exposed": dataset.exposed.astype(float), **dict(zip(cols, arrs))},
                              n=len(dataset))
        fit = fit_binomial(design, response, link="log", robust=True)
        se = fit.se(robust=True)
    j = fit.columns.index("exposed")
    return float(np.exp(fit.params[j])), float(se[j])


def prevalence_among_cases(dataset: LandmarkDataset, response=None, method: str = "proportion") -> float:
    """Share of exposed-at-``l`` subjects among window cases.

    With pseudo-value ``response`` the cases are weighted by their
    pseudo-values: ``sum(theta * E) / sum(theta)``. ``method="glm"`` fits the
    log-link model of exposure on the outcome indicator and evaluates it at
    ``D = 1`` instead of taking the proportion.
    """
    e = dataset.exposed.astype(float)
    if response is None:
        d = dataset.event
        if dataset.has_censoring:
            raise CensoringPresent(f"landmark {dataset.landmark}: censored rows present; use pseudo-values")
    else:
        d = np.asarray(response, dtype=float)
    mass = float(np.sum(d))
    if mass <= 0:
        raise NoCases(f"landmark {dataset.landmark}: no cases in the window")
    if method == "proportion":
        return float(np.sum(d * e) / mass)
    if method != "glm":
        raise ValueError(f"unknown method {method!r}")
    if response is not None:
        raise ValueError("the GLM route is defined for observed outcomes only")
    design = build_design({"case": d}, n=len(d))
    fit = fit_binomial(design, e, link="log")
    return float(np.exp(fit.params.sum()))


def prevalence_se_logit(prevalence: float, n_cases: float) -> float:
    """Binomial standard error of ``logit(prevalence)`` among ``n_cases`` cases."""
    if not 0 < prevalence < 1:
        raise DegenerateInputs(f"prevalence {prevalence} must lie strictly inside (0, 1)")
    return float(1.0 / np.sqrt(n_cases * prevalence * (1 - prevalence)))


def paf_delta_variance(prevalence: float, rr: float, se_prev_logit: float, se_log_rr: float,
                       covariance: float = 0.0) -> float:
    """First-order delta-method variance of ``prevalence * (rr - 1) / rr``.

    Prevalence enters on the logit scale and the risk ratio on the log
    scale. By default the two estimates are treated as independent; pass
    their ``covariance`` (logit prevalence with log RR) otherwise. In an
    unadjusted 2x2 table both equal ``log a - log c`` up to constants, so
    the independent version understates the variance there. Bootstrap
    intervals are the default elsewhere.
    """
    if not rr > 0:
        raise DegenerateInputs(f"rr must be > 0, got {rr}")
    if not 0 < prevalence < 1:
        raise DegenerateInputs(f"prevalence {prevalence} must lie strictly inside (0, 1)")
    d_logit_p = (1.0 - 1.0 / rr) * prevalence * (1.0 - prevalence)
    d_log_rr = prevalence / rr
    return float(d_logit_p ** 2 * se_prev_logit ** 2 + d_log_rr ** 2 * se_log_rr ** 2
                 + 2.0 * d_logit_p * d_log_rr * covariance)


__all__ = [
    "ClampWarning", "DesignMatrix", "GlmFit", "INTERCEPT", "binomial_loglik", "binomial_score",
    "build_design", "check_rank", "expand_covariates", "fit_binomial", "paf_delta_variance",
    "predict_prob", "prevalence_among_cases", "prevalence_se_logit", "risk_ratio_at_landmark",
    "risk_ratio_fit",
]
