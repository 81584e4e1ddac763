import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize
from scipy.special import logit

from landmark_paf.errors import (
    CensoringPresent,
    DegenerateInputs,
    MissingPredictor,
    NoCases,
    NotConverged,
    RankDeficientDesign,
    Separation,
)
from landmark_paf.event_data import build_landmark_dataset
from landmark_paf.glm import (
    ClampWarning,
    DesignMatrix,
    GlmFit,
    binomial_loglik,
    binomial_score,
    build_design,
    fit_binomial,
    paf_delta_variance,
    predict_prob,
    prevalence_among_cases,
    risk_ratio_at_landmark,
)

from conftest import make_cohort


def two_by_two(a, n1, c, n0, covariate=None):
    """Landmark dataset at l=1 (window 10) with a/n1 exposed and c/n0 unexposed cases."""
    rows = []
    i = 0
    for exposed, cases, n in ((True, a, n1), (False, c, n0)):
        for j in range(n):
            base = {} if covariate is None else {"z": float(covariate(exposed, j))}
            rows.append((i, 0.0, 0.5 if exposed else None, 5.0 if j < cases else 20.0,
                         1 if j < cases else 0, base))
            i += 1
    return build_landmark_dataset(make_cohort(rows, horizon=20.0), 1.0, 10.0)


def random_problem(rng, link):
    n, p = rng.integers(30, 200), rng.integers(1, 4)
    X = np.column_stack([np.ones(n), rng.normal(size=(n, p))])
    beta = rng.normal(scale=0.3, size=p + 1)
    if link == "log":
        beta[0] = -2.0
        X[:, 1:] = np.abs(X[:, 1:]) * 0.3
    eta = X @ beta
    mu = np.exp(eta) if link == "log" else 1 / (1 + np.exp(-eta))
    y = (rng.random(n) < np.clip(mu, 0, 0.95)).astype(float)
    cols = ("intercept",) + tuple(f"x{j}" for j in range(p))
    return DesignMatrix(X, cols), y


class TestFitBinomial:

    def test_two_by_two_log(self):
        X = np.column_stack([np.ones(100), np.r_[np.ones(50), np.zeros(50)]])
        y = np.r_[np.ones(10), np.zeros(40), np.ones(5), np.zeros(45)]
        fit = fit_binomial(DesignMatrix(X, ("intercept", "exposed")), y, link="log")
        npt.assert_allclose(np.exp(fit.params[1]), 2.0, rtol=1e-8)
        assert fit.converged and fit.max_abs_score <= 1e-8

    def test_equal_proportions(self):
        X = np.column_stack([np.ones(60), np.r_[np.ones(30), np.zeros(30)]])
        y = np.r_[np.ones(6), np.zeros(24), np.ones(6), np.zeros(24)]
        fit = fit_binomial(DesignMatrix(X, ("intercept", "exposed")), y, link="log")
        npt.assert_allclose(fit.params[1], 0.0, atol=1e-8)

    def test_all_zero_logit(self):
        with pytest.raises((Separation, NotConverged)):
            fit_binomial(build_design({}, n=20), np.zeros(20), link="logit")

    def test_rank_deficient(self):
        x = np.r_[np.ones(10), np.zeros(10)]
        with pytest.raises(RankDeficientDesign):
            fit_binomial(build_design({"a": x, "b": 2 * x}), np.r_[np.ones(5), np.zeros(15)])

    @pytest.mark.parametrize("link", ["log", "logit"])
    def test_intercept_only_mean(self, link):
        y = np.r_[np.ones(30), np.zeros(70)]
        fit = fit_binomial(build_design({}, n=100), y, link=link)
        npt.assert_allclose(predict_prob(fit), 0.3, atol=1e-8)
        if link == "logit":
            npt.assert_allclose(fit.params[0], logit(0.3), atol=1e-12)

    def test_pseudo_value_response_mean(self):
        rng = np.random.default_rng(1)
        y = rng.uniform(-0.2, 1.1, 200)
        fit = fit_binomial(build_design({}, n=200), y, link="log")
        npt.assert_allclose(predict_prob(fit), y.mean(), rtol=1e-10)

    def test_weight_invariance(self):
        rng = np.random.default_rng(2)
        d, y = random_problem(rng, "logit")
        w = rng.uniform(0.5, 2, len(y))
        a = fit_binomial(d, y, weights=w, link="logit")
        b = fit_binomial(d, y, weights=7.3 * w, link="logit")
        npt.assert_allclose(a.params, b.params, rtol=0, atol=1e-10)

    @pytest.mark.parametrize("link", ["log", "logit"])
    def test_matches_direct_optimizer(self, link):
        rng = np.random.default_rng(11)
        d, y = random_problem(rng, link)
        fit = fit_binomial(d, y, link=link)
        res = minimize(lambda b: -binomial_loglik(d, y, b, link=link), fit.params * 0.9,
                       jac=lambda b: -binomial_score(d, y, b, link=link), method="BFGS",
                       options={"gtol": 1e-10})
        npt.assert_allclose(fit.params, res.x, atol=1e-5)
        assert fit.loglik >= -res.fun - 1e-9

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.sampled_from(["log", "logit"]))
    def test_gradient_finite_differences(self, seed, link):
        rng = np.random.default_rng(seed)
        d, y = random_problem(rng, link)
        b = rng.normal(scale=0.1, size=d.values.shape[1])
        if link == "log":
            b[0] = -2.5
        g = binomial_score(d, y, b, link=link)
        eps = 1e-6
        fd = np.array([(binomial_loglik(d, y, b + eps * e, link=link)
                        - binomial_loglik(d, y, b - eps * e, link=link)) / (2 * eps)
                       for e in np.eye(len(b))])
        npt.assert_allclose(g, fd, rtol=1e-6, atol=1e-6 * max(1.0, np.max(np.abs(g))))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.sampled_from(["log", "logit"]))
    def test_score_and_covariance_at_optimum(self, seed, link):
        rng = np.random.default_rng(seed)
        d, y = random_problem(rng, link)
        try:
            fit = fit_binomial(d, y, link=link, robust=True)
        except (Separation, RankDeficientDesign):
            return
        except NotConverged as err:
            # the constrained log-binomial maximum can sit on mu = 1
            assert link == "log" and "boundary" in str(err)
            return
        assert np.max(np.abs(binomial_score(d, y, fit.params, link=link))) <= 1e-8
        npt.assert_allclose(fit.covariance, fit.covariance.T)
        assert np.min(np.linalg.eigvalsh(fit.covariance)) >= -1e-12

    def test_clusters_match_rows_when_singletons(self):
        rng = np.random.default_rng(5)
        d, y = random_problem(rng, "logit")
        a = fit_binomial(d, y, link="logit", robust=True)
        b = fit_binomial(d, y, link="logit", groups=np.arange(len(y)))
        npt.assert_allclose(a.robust_covariance, b.robust_covariance, rtol=1e-10)


class TestPredict:

    def test_zero_coefficients_logit(self):
        fit = GlmFit("logit", ("intercept", "x"), np.zeros(2), np.eye(2), True, 1, 0.0, 0.0, 10)
        assert predict_prob(fit, {"x": 3.0}) == 0.5

    def test_missing_predictor(self):
        fit = GlmFit("logit", ("intercept", "x"), np.zeros(2), np.eye(2), True, 1, 0.0, 0.0, 10)
        with pytest.raises(MissingPredictor):
            predict_prob(fit, {})

    def test_log_clamp_warns(self):
        fit = GlmFit("log", ("intercept", "x"), np.array([-0.1, 1.0]), np.eye(2), True, 1, 0.0, 0.0, 10)
        with pytest.warns(ClampWarning):
            assert predict_prob(fit, {"x": 1.0}) == 1.0


class TestLandmarkModels:

    def test_rr_two_by_two(self):
        rr, se = risk_ratio_at_landmark(two_by_two(10, 50, 5, 50))
        npt.assert_allclose(rr, 2.0, rtol=1e-8)
        npt.assert_allclose(se, np.sqrt(1 / 10 - 1 / 50 + 1 / 5 - 1 / 50), rtol=1e-6)

    def test_rr_null_by_permutation(self):
        rng = np.random.default_rng(0)
        n = 4000
        e = rng.random(n) < 0.4
        d = rng.random(n) < 0.2
        rows = [(i, 0.0, 0.5 if e[i] else None, 5.0 if d[i] else 20.0, int(d[i])) for i in range(n)]
        ds = build_landmark_dataset(make_cohort(rows), 1.0, 10.0)
        rr, se = risk_ratio_at_landmark(ds)
        assert abs(np.log(rr)) < 1.96 * se * 1.5

    def test_perfect_confounder(self):
        ds = two_by_two(10, 50, 5, 50, covariate=lambda ex, j: float(ex))
        with pytest.raises(RankDeficientDesign):
            risk_ratio_at_landmark(ds, ["z"])

    def test_censoring_rejected(self):
        c = make_cohort([(1, 0, 0.5, 3.0, 0), (2, 0, None, 5.0, 1), (3, 0, 0.5, 20.0, 0),
                         (4, 0, None, 20.0, 0)])
        ds = build_landmark_dataset(c, 1.0, 10.0)
        with pytest.raises(CensoringPresent):
            risk_ratio_at_landmark(ds)

    def test_prevalence_proportion(self):
        ds = two_by_two(3, 20, 7, 20)
        npt.assert_allclose(prevalence_among_cases(ds), 0.3)
        npt.assert_allclose(prevalence_among_cases(ds, method="glm"), 0.3, atol=1e-10)

    def test_prevalence_all_exposed(self):
        assert prevalence_among_cases(two_by_two(4, 20, 0, 20)) == 1.0

    def test_prevalence_toy6(self, toy6):
        ds = build_landmark_dataset(toy6, 1, 10)
        npt.assert_allclose(prevalence_among_cases(ds), 2 / 3)

    def test_no_cases(self):
        with pytest.raises(NoCases):
            prevalence_among_cases(two_by_two(0, 20, 0, 20))


class TestDeltaVariance:

    def test_zero_noise(self):
        assert paf_delta_variance(0.4, 2.0, 0.0, 0.0) == 0.0

    def test_null_gradient(self):
        npt.assert_allclose(paf_delta_variance(0.3, 1.0, 0.7, 0.2), 0.3 ** 2 * 0.2 ** 2)

    def test_degenerate(self):
        with pytest.raises(DegenerateInputs):
            paf_delta_variance(1.0, 2.0, 0.1, 0.1)

    def test_independent_version_understates_two_by_two(self):
        # logit prevalence and log RR share log a - log c; ignoring that is anti-conservative
        v_ind = paf_delta_variance(0.5, 2.0, 0.1, 0.1)
        v_cor = paf_delta_variance(0.5, 2.0, 0.1, 0.1, covariance=0.01)
        assert v_cor > v_ind

    def test_parametric_bootstrap(self):
        n1, n0, p1, p0 = 400, 600, 0.3, 0.15
        rng = np.random.default_rng(123)
        reps = []
        for _ in range(2000):
            a, c = rng.binomial(n1, p1), rng.binomial(n0, p0)
            prev = a / (a + c)
            rr = (a / n1) / (c / n0)
            reps.append(prev * (rr - 1) / rr)
        a, c = n1 * p1, n0 * p0
        prev = a / (a + c)
        rr = p1 / p0
        se = np.sqrt(1 / a - 1 / n1 + 1 / c - 1 / n0)
        # unconditionally, logit prevalence and log RR have the same variance and covariance
        v = paf_delta_variance(prev, rr, se, se, covariance=se ** 2)
        npt.assert_allclose(v, np.var(reps), rtol=0.15)
