"""Attributable-fraction estimators, supermodel and bootstrap series."""
from .estimators import (
    IpwOptions,
    LandmarkEstimate,
    Method,
    Route,
    estimate_at_landmark,
    marginal_risk,
    paf0_lm,
    paf_lm,
    paf_lm_marginal,
)
from .series import (
    SERIES_COLUMNS,
    EstimateSeries,
    EstimatorConfig,
    bootstrap_series,
    estimate_series,
    frame_to_csv,
    replicate_seeds,
    summarize_replications,
)
from .supermodel import SupermodelResult, SupermodelSpec, WaldTest, coefficient_table, supermodel_fit
