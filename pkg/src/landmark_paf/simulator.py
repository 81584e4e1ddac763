"""Extended illness-death model: cohort simulation and exact landmark PAF curves.

States: 0 initial, 1 exposed, 2 event from initial, 3 competing from initial,
4 event after exposure, 5 competing after exposure. Hazards are functions of
study time (clock-forward / Markov).
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Literal

import numpy as np
from scipy.integrate import solve_ivp

from .event_data import ValidatedCohort, _readonly

TRANSITIONS = ("a01", "a02", "a03", "a14", "a15")


@dataclass(frozen=True)
class HazardSpec:
    """Constant (``rate``) or Weibull (``shape``, ``scale``) hazard.

    The Weibull hazard is ``(shape/scale) * (t/scale)**(shape-1)``.
    """

    kind: Literal["constant", "weibull"]
    rate: float = 0.0
    shape: float = 1.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind == "constant":
            if not self.rate > 0:
                raise ValueError(f"constant hazard needs rate > 0, got {self.rate}")
        elif self.kind == "weibull":
            if not (self.shape > 0 and self.scale > 0):
                raise ValueError("Weibull hazard needs shape > 0 and scale > 0")
        else:
            raise ValueError(f"unknown hazard kind {self.kind!r}")

    @classmethod
    def constant(cls, rate):
        return cls("constant", rate=float(rate))

    @classmethod
    def weibull(cls, shape, scale):
        return cls("weibull", shape=float(shape), scale=float(scale))

    def cumulative(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "constant":
            return self.rate * t
        return (t / self.scale) ** self.shape

    def to_dict(self):
        if self.kind == "constant":
            return {"constant": self.rate}
        return {"weibull": {"shape": self.shape, "scale": self.scale}}

    @classmethod
    def from_dict(cls, d):
        if isinstance(d, (int, float)):
            return cls.constant(d)
        if "constant" in d:
            return cls.constant(d["constant"])
        if "weibull" in d:
            return cls.weibull(d["weibull"]["shape"], d["weibull"]["scale"])
        raise ValueError(f"cannot parse hazard spec {d!r}")


def hazard_eval(spec: HazardSpec, t):
    """Hazard rate at ``t``; ``inf`` at ``t == 0`` for Weibull shapes below one."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be >= 0")
    if spec.kind == "constant":
        out = np.full(t.shape, spec.rate)
    else:
        k, b = spec.shape, spec.scale
        with np.errstate(divide="ignore"):
            out = (k / b) * (t / b) ** (k - 1.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class HazardModelSpec:
    a01: HazardSpec
    a02: HazardSpec
    a03: HazardSpec
    a14: HazardSpec
    a15: HazardSpec

    def to_dict(self):
        return {k: getattr(self, k).to_dict() for k in TRANSITIONS}

    @classmethod
    def from_dict(cls, d):
        missing = [k for k in TRANSITIONS if k not in d]
        if missing:
            raise ValueError(f"hazard model lacks transitions {missing}")
        return cls(**{k: HazardSpec.from_dict(d[k]) for k in TRANSITIONS})

    @classmethod
    def constant(cls, a01, a02, a03, a14, a15):
        c = HazardSpec.constant
        return cls(c(a01), c(a02), c(a03), c(a14), c(a15))

    @property
    def all_constant(self):
        return all(getattr(self, k).kind == "constant" for k in TRANSITIONS)


@dataclass(frozen=True)
class SimConfig:
    n: int
    seed: int
    horizon: float
    censoring_rate: float | None = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not self.horizon > 0:
            raise ValueError("horizon must be > 0")
        if self.censoring_rate is not None and not self.censoring_rate > 0:
            raise ValueError("censoring_rate must be > 0 when given")


# ---------------------------------------------------------------------------
# simulation

def _invert_cumulative(specs, start, target, upper):
    """Solve ``sum_k (H_k(start + w) - H_k(start)) = target`` for ``w``.

    Bracketed bisection on ``[0, upper - start]``; values with no root inside
    the bracket come back as ``inf``. Constant hazards use the closed form.
    """
    start = np.asarray(start, dtype=float)
    target = np.asarray(target, dtype=float)
    if all(s.kind == "constant" for s in specs):
        return target / sum(s.rate for s in specs)

    def cum(t):
        return sum(s.cumulative(t) for s in specs)

    base = cum(start)
    hi = np.maximum(upper - start, 0.0)
    out = np.full(start.shape, np.inf)
    ok = cum(start + hi) - base >= target
    lo_w = np.zeros(ok.sum())
    hi_w = hi[ok].copy()
    s_ok, b_ok, t_ok = start[ok], base[ok], target[ok]
    # bisection to 1e-10 absolute on the waiting time
    while hi_w.size and np.max(hi_w - lo_w) > 1e-10:
        mid = 0.5 * (lo_w + hi_w)
        below = cum(s_ok + mid) - b_ok < t_ok
        lo_w = np.where(below, mid, lo_w)
        hi_w = np.where(below, hi_w, mid)
    out[ok] = 0.5 * (lo_w + hi_w)
    return out


def _choose(specs, t, u):
    """Index of the destination chosen with probability proportional to the hazards at ``t``."""
    rates = np.stack([np.broadcast_to(hazard_eval(s, t), t.shape) for s in specs], axis=1)
    rates = np.where(np.isfinite(rates), rates, 0.0)
    total = rates.sum(axis=1)
    cum = np.cumsum(rates, axis=1) / np.where(total > 0, total, 1.0)[:, None]
    return (u[:, None] > cum[:, :-1]).sum(axis=1)


def simulate_cohort(model: HazardModelSpec, cfg: SimConfig) -> ValidatedCohort:
    """Draw ``cfg.n`` subjects from the extended illness-death model.

    Subject ``i`` uses the uniforms in row ``i`` of a ``(n, 5)`` block drawn
    from ``numpy.random.default_rng(seed)``, so a subject's trajectory depends
    only on ``(seed, i)`` and not on ``n``. Subjects still in state 0 or 1 at
    the horizon are event-free survivors (``event_type 0`` at the horizon).
    """
    n, horizon = cfg.n, float(cfg.horizon)
    u = np.random.default_rng(cfg.seed).random((n, 5))
    # strictly positive exponential targets
    e0 = -np.log1p(-u[:, 0])
    e1 = -np.log1p(-u[:, 2])

    w0 = _invert_cumulative([model.a01, model.a02, model.a03], np.zeros(n), e0, horizon)
    t0 = w0
    left0 = t0 <= horizon
    dest0 = np.full(n, -1)
    dest0[left0] = _choose([model.a01, model.a02, model.a03], t0[left0], u[left0, 1])

    exposure = np.full(n, np.nan)
    final = np.full(n, horizon)
    event = np.zeros(n, dtype=np.int8)

    direct = left0 & (dest0 > 0)
    final[direct] = t0[direct]
    event[direct] = dest0[direct]  # 1 -> event of interest, 2 -> competing

    exp_mask = left0 & (dest0 == 0)
    exposure[exp_mask] = t0[exp_mask]
    if exp_mask.any():
        te = t0[exp_mask]
        w1 = _invert_cumulative([model.a14, model.a15], te, e1[exp_mask], horizon)
        t1 = te + w1
        left1 = t1 <= horizon
        dest1 = np.full(te.shape, -1)
        dest1[left1] = _choose([model.a14, model.a15], t1[left1], u[exp_mask, 3][left1])
        f = np.where(left1, t1, horizon)
        ev = np.where(left1, dest1 + 1, 0)
        final[exp_mask] = f
        event[exp_mask] = ev

    has_censoring = False
    if cfg.censoring_rate is not None:
        c = -np.log1p(-u[:, 4]) / cfg.censoring_rate
        cens = c < final
        final = np.where(cens, c, final)
        event = np.where(cens, 0, event).astype(np.int8)
        exposure = np.where(cens & (exposure > c), np.nan, exposure)
        has_censoring = True

    ids = np.arange(n)
    return ValidatedCohort(
        subject_ids=_readonly(ids),
        entry_time=_readonly(np.zeros(n)),
        exposure_time=_readonly(exposure),
        final_time=_readonly(final),
        event_type=_readonly(event.astype(np.int8)),
        baseline={},
        covariate_schema={},
        has_censoring=has_censoring,
        study_horizon=horizon,
        panel=None,
    )


# ---------------------------------------------------------------------------
# exact transition probabilities

_RTOL = 1e-11
_ATOL = 1e-12


def _rates(model, t, exposure_off=None):
    a = [hazard_eval(getattr(model, k), t) for k in TRANSITIONS]
    if exposure_off is not None and exposure_off[0] <= t <= exposure_off[1]:
        a[0] = 0.0
    return a


def _forward(model, s, t, p0, exposure_off=None):
    """Integrate the forward equations from ``s`` to ``t`` starting at distribution ``p0``."""
    if t == s:
        return np.asarray(p0, dtype=float)
    eps = 0.0
    if s == 0.0 and any(getattr(model, k).kind == "weibull" and getattr(model, k).shape < 1
                        for k in TRANSITIONS):
        eps = 1e-12  # hazards infinite at zero; mass leaving on [0, eps] is negligible

    def rhs(u, p):
        a01, a02, a03, a14, a15 = _rates(model, u, exposure_off)
        out0 = (a01 + a02 + a03) * p[0]
        out1 = (a14 + a15) * p[1]
        return [-out0, a01 * p[0] - out1, a02 * p[0], a03 * p[0], a14 * p[1], a15 * p[1]]

    breaks = [s + eps, t]
    if exposure_off is not None:
        breaks = sorted({s + eps, t, *[b for b in exposure_off if s + eps < b < t]})
    p = np.asarray(p0, dtype=float)
    for a, b in zip(breaks[:-1], breaks[1:]):
        sol = solve_ivp(rhs, (a, b), p, method="DOP853", rtol=_RTOL, atol=_ATOL)
        if not sol.success:
            raise RuntimeError(f"ODE integration failed: {sol.message}")
        p = sol.y[:, -1]
    return p


def state_occupation(model: HazardModelSpec, s: float, t: float, from_exposed: bool = False,
                     exposure_off=None) -> np.ndarray:
    """Six-state occupation probabilities at ``t`` from state 0 (or 1) at ``s``."""
    if not 0 <= s <= t:
        raise ValueError("need 0 <= s <= t")
    p0 = np.zeros(6)
    p0[1 if from_exposed else 0] = 1.0
    return _forward(model, s, t, p0, exposure_off)


def true_transition_probabilities(model: HazardModelSpec, s: float, t: float,
                                  from_exposed: bool = False) -> dict[str, float]:
    """Probabilities of {initial, exposed, event, competing} at ``t`` given the state at ``s``.

    Events of interest and competing events are pooled over the direct and
    via-exposure paths.
    """
    p = state_occupation(model, s, t, from_exposed)
    return {"initial": float(p[0]), "exposed": float(p[1]),
            "event": float(p[2] + p[4]), "competing": float(p[3] + p[5])}


@dataclass(frozen=True)
class LandmarkTruth:
    landmark: float
    window: float
    prevalence_at_risk: float  # P(E_l = 1 | A_l = 1)
    risk_unexposed: float      # P(D = 1 | E_l = 0, A_l = 1)
    risk_exposed: float        # P(D = 1 | E_l = 1, A_l = 1)
    risk_marginal: float       # P(D = 1 | A_l = 1)
    risk_no_exposure: float    # risk from state 0 at l with exposure prevented on [l, l+h]
    paf_at_landmark: float
    paf_window: float


def landmark_truth(model: HazardModelSpec, l: float, h: float,
                   keep_prior_exposure: bool = False) -> LandmarkTruth:
    """All exact window risks at landmark ``l`` and the two PAF variants.

    The window-variant counterfactual is the risk of a subject in the initial
    state at ``l`` when exposure acquisition is switched off on ``[l, l+h]``;
    this is what the unexposed-at-``l`` pseudo-value estimator targets. With
    ``keep_prior_exposure`` the subjects already exposed at ``l`` keep their
    factual risk instead.
    """
    if l < 0 or not h > 0:
        raise ValueError("need l >= 0 and h > 0")
    at_l = state_occupation(model, 0.0, l)
    alive = at_l[0] + at_l[1]
    if alive <= 0:
        raise ValueError(f"nobody is at risk at landmark {l}")
    prev = at_l[1] / alive
    end = l + h
    from0 = state_occupation(model, l, end)
    from1 = state_occupation(model, l, end, from_exposed=True)
    no_exp = state_occupation(model, l, end, exposure_off=(l, end))
    r0 = from0[2] + from0[4]
    r1 = from1[4]
    r00 = no_exp[2] + no_exp[4]
    marginal = (1 - prev) * r0 + prev * r1
    cf = (1 - prev) * r00 + prev * r1 if keep_prior_exposure else r00
    return LandmarkTruth(
        landmark=float(l), window=float(h), prevalence_at_risk=float(prev),
        risk_unexposed=float(r0), risk_exposed=float(r1), risk_marginal=float(marginal),
        risk_no_exposure=float(r00),
        paf_at_landmark=float((marginal - r0) / marginal),
        paf_window=float((marginal - cf) / marginal),
    )


def true_paf(model: HazardModelSpec, l: float, h: float,
             variant: Literal["AtLandmark", "Window"] = "AtLandmark",
             keep_prior_exposure: bool = False) -> float:
    truth = landmark_truth(model, l, h, keep_prior_exposure)
    if variant == "AtLandmark":
        return truth.paf_at_landmark
    if variant == "Window":
        return truth.paf_window
    raise ValueError(f"unknown variant {variant!r}")


def expected_risk_set_counts(model: HazardModelSpec, n: int, landmarks) -> tuple[np.ndarray, np.ndarray]:
    """Expected numbers of unexposed and exposed subjects at risk at each landmark."""
    un, ex = [], []
    for l in landmarks:
        p = state_occupation(model, 0.0, float(l))
        un.append(n * p[0])
        ex.append(n * p[1])
    return np.array(un), np.array(ex)


def without_exposure(model: HazardModelSpec, rate: float = 1e-12) -> HazardModelSpec:
    """Copy of ``model`` with a negligible constant exposure hazard."""
    return replace(model, a01=HazardSpec.constant(rate))
