"""Pooled landmark supermodel with smooth landmark-dependent coefficients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from ..errors import InsufficientLandmarks
from ..event_data import StackedLandmarkDataset
from ..glm import GlmFit, build_design, expand_covariates, fit_binomial
from ..survival import pseudo_observations


@dataclass(frozen=True)
class SupermodelSpec:
    """Landmark basis of the pooled models.

    ``basis="polynomial"`` uses ``l, l**2, ..., l**degree``;
    ``basis="indicator"`` uses one indicator per landmark after the first
    (saturated in the landmark). The ``interact_*`` switches let the
    intercept and the exposure/outcome effect vary with the landmark.
    """

    degree: int = 2
    interact_intercept: bool = True
    interact_effect: bool = True
    basis: str = "polynomial"

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be >= 0")
        if self.basis not in ("polynomial", "indicator"):
            raise ValueError(f"unknown basis {self.basis!r}")


@dataclass(frozen=True)
class WaldTest:
    model: str
    terms: tuple[str, ...]
    statistic: float
    df: int
    p_value: float


@dataclass(frozen=True)
class SupermodelResult:
    spec: SupermodelSpec
    landmarks: np.ndarray
    prevalence_fit: GlmFit
    rr_fit: GlmFit
    exposure_fit: GlmFit | None
    route: str
    wald: tuple[WaldTest, ...]

    def _basis(self, l):
        return _basis_columns(np.atleast_1d(np.asarray(l, dtype=float)), self.spec, self.landmarks)

    def _check(self, l):
        l = np.atleast_1d(np.asarray(l, dtype=float))
        lo, hi = self.landmarks.min(), self.landmarks.max()
        if np.any((l < lo - 1e-12) | (l > hi + 1e-12)):
            raise ValueError(f"landmark outside [{lo}, {hi}]")
        if self.spec.basis == "indicator" and not np.all(np.isin(l, self.landmarks)):
            raise ValueError("the indicator basis is only defined at the fitted landmarks")
        return l

    def rr(self, l):
        l = self._check(l)
        b = self._basis(l)
        coef = self.rr_fit.coefficients
        eta = coef["exposed"] + sum(coef.get(f"exposed:{k}", 0.0) * v for k, v in b.items())
        return np.exp(eta)

    def prevalence(self, l):
        """Exposure prevalence among window cases."""
        l = self._check(l)
        b = self._basis(l)
        if self.route == "Complete":
            coef = self.prevalence_fit.coefficients
            eta = coef["intercept"] + coef["case"]
            for k, v in b.items():
                eta = eta + coef.get(k, 0.0) * v + coef.get(f"case:{k}", 0.0) * v
            return np.exp(eta)
        # Bayes: P(E | D) = p RR / (p RR + 1 - p), p the prevalence at risk
        coef = self.exposure_fit.coefficients
        eta = coef["intercept"] + sum(coef.get(k, 0.0) * v for k, v in b.items())
        p = expit(eta)
        r = self.rr(l)
        return p * r / (p * r + 1.0 - p)

    def paf(self, l):
        p, r = self.prevalence(l), self.rr(l)
        return p * (r - 1.0) / r


def _basis_columns(l, spec: SupermodelSpec, landmarks) -> dict[str, np.ndarray]:
    if spec.basis == "indicator":
        lms = np.unique(landmarks)
        return {f"lm[{_fmt(x)}]": (l == x).astype(float) for x in lms[1:]}
    return {("l" if j == 1 else f"l^{j}"): l ** j for j in range(1, spec.degree + 1)}


def _fmt(x):
    return repr(float(x)).removesuffix(".0")


def _pseudo_stacked(stacked: StackedLandmarkDataset) -> np.ndarray:
    return np.concatenate([pseudo_observations(stacked.datasets[l]).values
                           for l in sorted(stacked.datasets)])


def supermodel_fit(stacked: StackedLandmarkDataset, spec: SupermodelSpec = SupermodelSpec(),
                   adjustment: Sequence[str] = (), censoring_route: str = "auto") -> SupermodelResult:
    """Fit the pooled prevalence and risk-ratio models on stacked landmark data.

    Risk-ratio model: ``log P(D | E, Z, l) = b(l) + E * c(l) + gamma Z``.
    Prevalence model (complete data): ``log P(E | D, l) = a(l) + D * d(l)``.
    Under censoring the outcome is replaced by pseudo-values in the risk
    model and the prevalence among cases is recovered from a logistic
    model of exposure at risk and the risk ratio by Bayes' rule. Standard
    errors are clustered on subjects.
    """
    lms = np.unique(stacked.landmark)
    if spec.basis == "polynomial" and lms.size < spec.degree + 1:
        raise InsufficientLandmarks(f"{lms.size} distinct landmarks; degree {spec.degree} "
                                    f"needs at least {spec.degree + 1}")
    has_cens = any(d.has_censoring for d in stacked.datasets.values())
    route = censoring_route
    if route == "auto":
        route = "PseudoValues" if has_cens else "Complete"
    basis = _basis_columns(stacked.landmark, spec, lms)
    groups = stacked.subject_ids
    n = len(stacked)
    e = stacked.exposed.astype(float)
    if route == "Complete":
        y = stacked.event
    else:
        y = _pseudo_stacked(stacked)

    adj_cols, adj_arrs, _ = expand_covariates(stacked.covariates, adjustment, stacked.covariate_schema)
    rr_cols = {}
    if spec.interact_intercept:
        rr_cols.update(basis)
    rr_cols["exposed"] = e
    if spec.interact_effect:
        rr_cols.update({f"exposed:{k}": e * v for k, v in basis.items()})
    rr_cols.update(dict(zip(adj_cols, adj_arrs)))
    rr_fit = fit_binomial(build_design(rr_cols, n=n), y, link="log", groups=groups, robust=True)

    exposure_fit = None
    if route == "Complete":
        pv_cols = {}
        if spec.interact_intercept:
            pv_cols.update(basis)
        pv_cols["case"] = y
        if spec.interact_effect:
            pv_cols.update({f"case:{k}": y * v for k, v in basis.items()})
        prev_fit = fit_binomial(build_design(pv_cols, n=n), e, link="log", groups=groups, robust=True)
    else:
        ex_cols = dict(basis) if spec.interact_intercept else {}
        exposure_fit = fit_binomial(build_design(ex_cols, n=n), e, link="logit", groups=groups, robust=True)
        prev_fit = exposure_fit

    tests = []
    for name, fit, prefix in (("prevalence", prev_fit, "case:"), ("rr", rr_fit, "exposed:")):
        if route != "Complete" and name == "prevalence":
            continue
        terms = [c for c in fit.columns if c.startswith(prefix)]
        if terms:
            stat, df, p = fit.wald(terms, robust=True)
            tests.append(WaldTest(name, tuple(terms), stat, df, p))
    return SupermodelResult(spec, lms, prev_fit, rr_fit, exposure_fit, route, tuple(tests))


def coefficient_table(result: SupermodelResult):
    """Rows ``(model, term, estimate, robust_se, wald, p_value)`` for every coefficient."""
    from scipy.stats import chi2
    rows = []
    for model, fit in (("prevalence" if result.route == "Complete" else "exposure",
                        result.prevalence_fit), ("rr", result.rr_fit)):
        se = fit.se(robust=True)
        for name, b, s in zip(fit.columns, fit.params, se):
            w = (b / s) ** 2 if s > 0 else float("nan")
            rows.append((model, name, float(b), float(s), float(w), float(chi2.sf(w, 1))))
    return rows
