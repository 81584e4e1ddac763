import numpy as np
import numpy.testing as npt
import pytest

from landmark_paf.event_data import SubjectRecord, validate_cohort
from landmark_paf.simulator import HazardModelSpec, HazardSpec

NULL_MODEL = HazardModelSpec.constant(0.005, 0.02, 0.02, 0.02, 0.02)


def harmful_model():
    """Weibull stand-in with mean time at risk about 8 (a01 constant 0.06, a14 > a02)."""
    w = HazardSpec.weibull
    return HazardModelSpec(HazardSpec.constant(0.06), w(1.3, 40.0), w(1.3, 11.0), w(1.3, 14.0),
                           w(1.3, 11.0))


def make_cohort(rows, horizon=20.0, schema=None, **kw):
    """Rows of ``(id, entry, exposure, final, event_type[, baseline[, panel]])``."""
    recs = []
    for r in rows:
        base = r[5] if len(r) > 5 else {}
        panel = r[6] if len(r) > 6 else ()
        recs.append(SubjectRecord(r[0], r[1], r[2], r[3], r[4], base, panel))
    return validate_cohort(recs, schema=schema, horizon=horizon, **kw)


def assert_jackknife_identity(pv):
    """Mean of pseudo-values equals the full-sample estimate."""
    npt.assert_allclose(np.mean(pv.values), pv.full_sample_estimate, rtol=0, atol=1e-10)


@pytest.fixture
def toy6():
    """Six subjects at landmark 1, window 10.

    Exposed before l: ids 1, 2, 6 (cases 1 and 6). Unexposed: 3 (case),
    4 (competing), 5 (survivor).
    """
    return make_cohort([
        (1, 0.0, 0.5, 4.0, 1),
        (2, 0.0, 0.5, 20.0, 0),
        (3, 0.0, None, 5.0, 1),
        (4, 0.0, None, 3.0, 2),
        (5, 0.0, None, 20.0, 0),
        (6, 0.0, 0.2, 8.0, 1),
    ])
