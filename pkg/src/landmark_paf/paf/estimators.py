"""Per-landmark attributable-fraction estimators."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import (
    EmptyRiskSet,
    LandmarkPafError,
    NoCases,
    ZeroMarginalRisk,
)
from ..event_data import EventType, LandmarkDataset, ValidatedCohort
from ..glm import (
    build_design,
    fit_binomial,
    paf_delta_variance,
    predict_prob,
    prevalence_among_cases,
    prevalence_se_logit,
    risk_ratio_at_landmark,
)
from ..ipw import (
    EXPOSURE,
    counterfactual_window_risk,
    estimate_weights,
    expand_person_time,
    fit_weighted_cox,
    landmark_rows_table,
)
from ..survival import conditional_cif, pseudo_observations, pseudo_observations_counterfactual


class Method(str, enum.Enum):
    LM_MIETTINEN = "LM_Miettinen"
    LM_MARGINAL = "LM_Marginal"
    PAF0_PSEUDO = "PAF0_Pseudo"
    PAF0_IPW = "PAF0_IPW"
    SUPERMODEL = "Supermodel"

    @classmethod
    def parse(cls, name) -> "Method":
        if isinstance(name, cls):
            return name
        for m in cls:
            if m.value.lower() == str(name).lower():
                return m
        raise ValueError(f"unknown method {name!r}; choose from {[m.value for m in cls]}")


class Route(str, enum.Enum):
    AUTO = "auto"
    COMPLETE = "Complete"
    PSEUDO = "PseudoValues"


@dataclass(frozen=True)
class IpwOptions:
    truncation_percentile: float | None = 99.0
    grid_step: float = 1.0
    exposure_as_covariate: bool = True
    confounders: tuple[str, ...] = ()
    lag: float = 0.0


@dataclass(frozen=True)
class LandmarkEstimate:
    """One landmark's estimate. ``flag`` is empty on success, else the failure reason."""

    estimate: float
    flag: str = ""
    components: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.flag


def _flagged(err: Exception) -> LandmarkEstimate:
    return LandmarkEstimate(float("nan"), type(err).__name__)


def _route(dataset: LandmarkDataset, route) -> Route:
    route = Route(route) if not isinstance(route, Route) else route
    if route is Route.AUTO:
        return Route.PSEUDO if dataset.has_censoring else Route.COMPLETE
    return route


def paf_lm(dataset: LandmarkDataset, adjustment: Sequence[str] = (),
           censoring_route="auto") -> LandmarkEstimate:
    """Miettinen-form estimate ``P_E * (RR - 1) / RR`` at one landmark.

    ``P_E`` is the exposure prevalence among window cases and ``RR`` the
    (adjusted) log-binomial risk ratio. The pseudo-value route replaces the
    binary outcome by jackknife pseudo-values of the window risk. Without
    cases the estimate is returned missing with flag ``"NoCases"``.
    """
    route = _route(dataset, censoring_route)
    response = None
    if route is Route.PSEUDO:
        response = pseudo_observations(dataset).values
    try:
        prev = prevalence_among_cases(dataset, response=response)
    except NoCases as err:
        return _flagged(err)
    rr, se_log_rr = risk_ratio_at_landmark(dataset, adjustment, response=response)
    est = prev * (rr - 1.0) / rr
    comp = {"prevalence": prev, "rr": rr, "se_log_rr": se_log_rr, "variance": float("nan")}
    if route is Route.COMPLETE and 0 < prev < 1:
        n_cases = float(dataset.event.sum())
        comp["variance"] = paf_delta_variance(prev, rr, prevalence_se_logit(prev, n_cases), se_log_rr)
    return LandmarkEstimate(float(est), "", comp)


def _aj_risk(dataset: LandmarkDataset) -> float:
    return conditional_cif(dataset, EventType.EVENT).at_window_end


def _unexposed_standardized_risk(dataset: LandmarkDataset, adjustment: Sequence[str]) -> float:
    """Cause-specific Cox models on the unexposed stratum, averaged over everyone at risk."""
    un = dataset.subset(~dataset.exposed)
    if len(un) == 0:
        raise EmptyRiskSet(f"landmark {dataset.landmark}: no unexposed subjects")
    table = landmark_rows_table(un)
    fe = fit_weighted_cox(table, None, EventType.EVENT, adjustment)
    fc = None
    if np.any(un.status == EventType.COMPETING):
        fc = fit_weighted_cox(table, None, EventType.COMPETING, adjustment)
    return counterfactual_window_risk(fe, fc, dataset, exposure_value=None)


def paf_lm_marginal(dataset: LandmarkDataset, adjustment: Sequence[str] = ()) -> LandmarkEstimate:
    """Marginal-form estimate ``(P(D) - P(D | E_l = 0)) / P(D)``.

    Both risks are Aalen-Johansen estimates on the landmark data; with
    ``adjustment`` the unexposed risk is standardized over the whole risk
    set from proportional-hazards models fitted to the unexposed.
    """
    marginal = _aj_risk(dataset)
    if marginal <= 0:
        return _flagged(ZeroMarginalRisk(f"landmark {dataset.landmark}: zero marginal risk"))
    if adjustment:
        unexposed = _unexposed_standardized_risk(dataset, adjustment)
    else:
        un = dataset.subset(~dataset.exposed)
        if len(un) == 0:
            raise EmptyRiskSet(f"landmark {dataset.landmark}: no unexposed subjects")
        unexposed = _aj_risk(un)
    est = (marginal - unexposed) / marginal
    return LandmarkEstimate(float(est), "", {"risk_marginal": marginal, "risk_unexposed": unexposed})


def marginal_risk(dataset: LandmarkDataset) -> float:
    """Window risk from an intercept-only log-binomial fit to pseudo-values."""
    theta = pseudo_observations(dataset).values
    if np.mean(theta) <= 0:
        raise ZeroMarginalRisk(f"landmark {dataset.landmark}: zero marginal risk")
    fit = fit_binomial(build_design({}, n=len(theta)), theta, link="log")
    return predict_prob(fit)


def ipw_counterfactual_risk(dataset: LandmarkDataset, cohort: ValidatedCohort | None = None,
                            adjustment: Sequence[str] = (), options: IpwOptions = IpwOptions()) -> float:
    table = expand_person_time(dataset, cohort, options.grid_step, options.confounders, options.lag)
    weights = estimate_weights(table, options.confounders, options.truncation_percentile)
    w = weights.weights
    if options.exposure_as_covariate:
        covs = ([EXPOSURE] if table.exposed.any() else []) + list(adjustment)
    else:
        keep = ~table.exposed
        table, w = table.select(keep), w[keep]
        covs = list(adjustment)
    if not np.any(table.status == EventType.EVENT):
        return 0.0
    fe = fit_weighted_cox(table, w, EventType.EVENT, covs)
    fc = None
    if np.any(table.status == EventType.COMPETING):
        fc = fit_weighted_cox(table, w, EventType.COMPETING, covs)
    return counterfactual_window_risk(fe, fc, dataset, exposure_value=0.0)


def paf0_lm(dataset: LandmarkDataset, backend: str = "Pseudo", cohort: ValidatedCohort | None = None,
            adjustment: Sequence[str] = (), options: IpwOptions = IpwOptions()) -> LandmarkEstimate:
    """Estimate of the fraction preventable by removing exposure during the window.

    ``(P(D) - P(D_0)) / P(D)`` with ``P(D)`` from an intercept-only fit to
    pseudo-values and ``P(D_0)`` either the mean counterfactual pseudo-value
    (``"Pseudo"``) or the weighted cause-specific Cox standardization
    (``"IPW"``).
    """
    try:
        m = marginal_risk(dataset)
    except ZeroMarginalRisk as err:
        return _flagged(err)
    b = backend.lower()
    if b == "pseudo":
        r0 = float(np.mean(pseudo_observations_counterfactual(dataset).values))
    elif b == "ipw":
        r0 = ipw_counterfactual_risk(dataset, cohort, adjustment, options)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    return LandmarkEstimate(float((m - r0) / m), "", {"risk_marginal": m, "risk_counterfactual": r0})


def estimate_at_landmark(method, dataset: LandmarkDataset, cohort: ValidatedCohort | None = None,
                         adjustment: Sequence[str] = (), censoring_route="auto",
                         ipw: IpwOptions = IpwOptions()) -> LandmarkEstimate:
    """Dispatch to the per-landmark estimator; model failures become flags."""
    method = Method.parse(method)
    try:
        if method is Method.LM_MIETTINEN:
            return paf_lm(dataset, adjustment, censoring_route)
        if method is Method.LM_MARGINAL:
            return paf_lm_marginal(dataset, adjustment)
        if method is Method.PAF0_PSEUDO:
            return paf0_lm(dataset, "Pseudo", cohort, adjustment, ipw)
        if method is Method.PAF0_IPW:
            return paf0_lm(dataset, "IPW", cohort, adjustment, ipw)
    except LandmarkPafError as err:
        return _flagged(err)
    raise ValueError(f"{method.value} is not a per-landmark method")
