"""Landmark estimation of population-attributable fractions for time-dependent exposures."""
from .errors import LandmarkPafError
from .event_data import (
    EventType,
    LandmarkDataset,
    Outcome,
    SubjectRecord,
    ValidatedCohort,
    build_landmark_dataset,
    choose_landmarks,
    read_cohort_csv,
    stack_landmarks,
    validate_cohort,
    write_cohort_csv,
)
from .simulator import HazardModelSpec, HazardSpec, SimConfig, simulate_cohort, true_paf

__version__ = "0.1.0"
