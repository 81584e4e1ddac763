"""Exception hierarchy shared by all modules."""


class LandmarkPafError(Exception):
    """Base class for every error raised by this package."""


# -- cohort and landmark data -------------------------------------------------

class CohortValidationError(LandmarkPafError, ValueError):
    """One or more subject records violate the cohort invariants.

    ``violations`` holds every problem found, not only the first one.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        lines = [f"{v.code} (subject {v.subject_id!r}): {v.message}" for v in self.violations]
        super().__init__(f"{len(self.violations)} cohort violation(s):\n  " + "\n  ".join(lines))

    @property
    def codes(self):
        return {v.code for v in self.violations}


class DuplicateId(CohortValidationError):
    pass


class NegativeTime(CohortValidationError):
    pass


class ExposureAfterEvent(CohortValidationError):
    pass


class UnknownCovariate(CohortValidationError):
    pass


class TimeBeforeEntry(LandmarkPafError, ValueError):
    pass


class EmptyRiskSet(LandmarkPafError):
    pass


class MixedWindows(LandmarkPafError, ValueError):
    pass


class HorizonExceeded(LandmarkPafError, ValueError):
    """A pseudo-value route was asked for a window ending after the study horizon."""


class InputFormatError(LandmarkPafError, ValueError):
    """Malformed cohort or panel file; the message carries the row number."""


# -- model fitting ------------------------------------------------------------

class NotConverged(LandmarkPafError):
    def __init__(self, iterations, last_score, what="model"):
        self.iterations = iterations
        self.last_score = last_score
        super().__init__(f"{what} did not converge after {iterations} iterations "
                         f"(max |score| = {last_score:.3g})")


class RankDeficientDesign(LandmarkPafError):
    def __init__(self, column, message=None):
        self.column = column
        super().__init__(message or f"design matrix is rank deficient; column {column!r} is collinear")


class Separation(LandmarkPafError):
    pass


class MissingPredictor(LandmarkPafError, KeyError):
    pass


class CensoringPresent(LandmarkPafError):
    pass


class NoCases(LandmarkPafError):
    pass


class DegenerateInputs(LandmarkPafError, ValueError):
    pass


class SingleSubject(LandmarkPafError):
    pass


class GridMismatch(LandmarkPafError, ValueError):
    pass


class AllExposedAtBaseline(LandmarkPafError):
    pass


# -- estimands ----------------------------------------------------------------

class ZeroMarginalRisk(LandmarkPafError):
    pass


class InsufficientLandmarks(LandmarkPafError, ValueError):
    pass


class TooManyFailures(LandmarkPafError):
    def __init__(self, landmark, failures, replicates):
        self.landmark = landmark
        self.failures = failures
        self.replicates = replicates
        super().__init__(f"{failures} of {replicates} bootstrap replicates failed at landmark {landmark}")


class NoEligibleLandmarks(LandmarkPafError):
    pass


class ConfigError(LandmarkPafError, ValueError):
    pass
