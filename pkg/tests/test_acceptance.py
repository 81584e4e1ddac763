"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line with the figures
it was judged on. Seeds are fixed up front and never tuned.
"""
import json
from collections import defaultdict

import numpy as np
import pytest
import yaml

from landmark_paf.cli import main as cli_main
from landmark_paf.event_data import build_landmark_dataset, choose_landmarks, stack_landmarks
from landmark_paf.glm import DesignMatrix, binomial_loglik, binomial_score, fit_binomial
from landmark_paf.ipw import cox_partial_loglik, cox_score, fit_cox
from landmark_paf.paf import SupermodelSpec, bootstrap_series, estimate_series, paf_lm, supermodel_fit
from landmark_paf.simulator import SimConfig, simulate_cohort, true_paf
from landmark_paf.survival import (
    _counterfactual_arrays,
    aalen_johansen,
    conditional_cif,
    pseudo_observations,
    pseudo_observations_counterfactual,
    window_survival,
)

from conftest import NULL_MODEL, harmful_model, make_cohort
from test_glm import random_problem
from test_ipw import grid_argmax, small_problem
from test_survival import kaplan_meier, survival_exhausted

pytestmark = pytest.mark.slow

NULL_HORIZON, NULL_WINDOW = 120.0, 30.0
HARM_HORIZON, HARM_WINDOW = 32.0, 8.0


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")
    return emit


def replicate_means(model, n, horizon, window, methods, reps, seed0):
    """Per-method, per-landmark lists of estimates over replications."""
    out = {m: defaultdict(list) for m in methods}
    for r in range(reps):
        c = simulate_cohort(model, SimConfig(n, seed0 + r, horizon))
        lms = choose_landmarks(c, window, min_count=20)
        for m in methods:
            s = estimate_series(c, lms, window, m)
            for l, e in zip(s.landmark, s.estimate):
                if np.isfinite(e):
                    out[m][float(l)].append(e)
    return out


def test_criterion_1_null_scenario(report):
    est = replicate_means(NULL_MODEL, 10_000, NULL_HORIZON, NULL_WINDOW, ["LM_Miettinen", "PAF0_Pseudo"],
                          100, 10_000)
    worst = {m: max(abs(np.mean(v)) for v in d.values()) for m, d in est.items()}
    lms = sorted(set().union(*[d.keys() for d in est.values()]))
    oracle = max(max(abs(true_paf(NULL_MODEL, l, NULL_WINDOW, k)) for k in ("AtLandmark", "Window"))
                 for l in lms)
    ok = all(w <= 0.02 for w in worst.values()) and oracle < 1e-9
    report(1, ok, f"max |mean| LM_Miettinen {worst['LM_Miettinen']:.4f}, PAF0_Pseudo "
                  f"{worst['PAF0_Pseudo']:.4f} over {len(lms)} landmarks; max |true_paf| {oracle:.1e}")
    assert ok


def test_criterion_2_ordering(report):
    est = replicate_means(harmful_model(), 2000, HARM_HORIZON, HARM_WINDOW, ["LM_Miettinen", "PAF0_Pseudo"],
                          100, 20_000)
    common = sorted(set(est["LM_Miettinen"]) & set(est["PAF0_Pseudo"]))
    diff = np.array([np.mean(est["PAF0_Pseudo"][l]) - np.mean(est["LM_Miettinen"][l]) for l in common])
    frac = float(np.mean(diff > 0))
    ok = diff.min() >= -0.01 and frac >= 0.8
    report(2, ok, f"min mean difference {diff.min():.4f}, positive at {frac:.0%} of {len(common)} landmarks")
    assert ok


def test_criterion_3_oracle_convergence(report):
    model = harmful_model()
    c = simulate_cohort(model, SimConfig(50_000, 0, HARM_HORIZON))
    lms = choose_landmarks(c, HARM_WINDOW, min_count=20)
    lm = estimate_series(c, lms, HARM_WINDOW, "LM_Miettinen")
    p0 = estimate_series(c, lms, HARM_WINDOW, "PAF0_Pseudo")
    d_lm = np.array([abs(e - true_paf(model, l, HARM_WINDOW, "AtLandmark")) for l, e in zip(lms, lm.estimate)])
    d_p0 = np.array([abs(e - true_paf(model, l, HARM_WINDOW, "Window")) for l, e in zip(lms, p0.estimate)])
    ok = bool(np.nanmax(d_lm) <= 0.02 and np.nanmax(d_p0) <= 0.02 and np.all(np.isfinite(d_lm + d_p0)))
    report(3, ok, f"max deviation LM_Miettinen {np.nanmax(d_lm):.4f} (at l={lms[int(np.nanargmax(d_lm))]:g}), "
                  f"PAF0_Pseudo {np.nanmax(d_p0):.4f} (at l={lms[int(np.nanargmax(d_p0))]:g}); "
                  f"landmarks {lms[0]:g}..{lms[-1]:g}; at l<=12 {np.max(d_lm[np.array(lms) <= 12]):.4f} / "
                  f"{np.max(d_p0[np.array(lms) <= 12]):.4f}")
    assert ok


def test_criterion_4_jackknife_identity(report):
    worst_id = 0.0
    worst_ind = 0.0
    n_sets = n_complete = n_exception = 0
    for k, (model, horizon, window) in enumerate([(NULL_MODEL, NULL_HORIZON, NULL_WINDOW),
                                                  (harmful_model(), HARM_HORIZON, HARM_WINDOW)]):
        for cens in (None, 0.02):
            for seed in range(5):
                c = simulate_cohort(model, SimConfig(800, 100 * k + seed, horizon, censoring_rate=cens))
                for l in np.arange(0, horizon - window + 1e-9, 3.0):
                    ds = build_landmark_dataset(c, l, window)
                    if len(ds) < 2:
                        continue
                    end = l + window
                    pv = pseudo_observations(ds)
                    sets = [(pv, ds.stop, ds.status, ds.event)]
                    if (~ds.exposed).sum() >= 2:
                        _, stop, status = _counterfactual_arrays(ds)
                        ev = ((status == 1) & (stop <= end)).astype(float)
                        sets.append((pseudo_observations_counterfactual(ds), stop, status, ev))
                    for p, stop, status, ev in sets:
                        n_sets += 1
                        if survival_exhausted(stop, status, end):
                            n_exception += 1
                            continue
                        worst_id = max(worst_id, abs(np.mean(p.values) - p.full_sample_estimate))
                        if not np.any((status == 0) & (stop < end)):
                            n_complete += 1
                            worst_ind = max(worst_ind, float(np.max(np.abs(p.values - ev))))
    ok = worst_id <= 1e-10 and worst_ind == 0.0 and n_exception == 0
    report(4, ok, f"{n_sets} pseudo-value sets, max |mean - AJ| {worst_id:.1e}; {n_complete} complete sets, "
                  f"max |value - indicator| {worst_ind:.1e}; {n_exception} sets with survival exhausted "
                  "after censoring")
    assert ok


def test_criterion_5_glm(report):
    rng = np.random.default_rng(5)
    worst_rr = worst_score = worst_grad = 0.0
    for _ in range(50):
        n1, n0 = rng.integers(10, 300, 2)
        a, c = rng.integers(1, n1), rng.integers(1, n0)
        X = np.column_stack([np.ones(n1 + n0), np.r_[np.ones(n1), np.zeros(n0)]])
        y = np.r_[np.ones(a), np.zeros(n1 - a), np.ones(c), np.zeros(n0 - c)]
        fit = fit_binomial(DesignMatrix(X, ("intercept", "exposed")), y, link="log")
        rr = (a / n1) / (c / n0)
        worst_rr = max(worst_rr, abs(np.exp(fit.params[1]) - rr) / rr)
        worst_score = max(worst_score, fit.max_abs_score)
    for k in range(50):
        link = ("log", "logit")[k % 2]
        d, y = random_problem(rng, link)
        b = rng.normal(scale=0.1, size=d.values.shape[1])
        if link == "log":
            b[0] = -2.5
        g = binomial_score(d, y, b, link=link)
        fd = np.array([(binomial_loglik(d, y, b + 1e-6 * e, link=link)
                        - binomial_loglik(d, y, b - 1e-6 * e, link=link)) / 2e-6 for e in np.eye(len(b))])
        worst_grad = max(worst_grad, float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1.0))))
    ok = worst_rr <= 1e-8 and worst_score <= 1e-8 and worst_grad <= 1e-6
    report(5, ok, f"max rel RR error {worst_rr:.1e}, max |score| {worst_score:.1e}, "
                  f"max rel gradient error {worst_grad:.1e} on 50 problems")
    assert ok


def test_criterion_6_cox(report):
    rng = np.random.default_rng(6)
    worst_grad = 0.0
    for _ in range(50):
        s, t, e, X, w = small_problem(rng)
        b = rng.normal(scale=0.5, size=X.shape[1])
        g = cox_score(s, t, e, X, b, w)
        fd = np.array([(cox_partial_loglik(s, t, e, X, b + 1e-6 * u, w)
                        - cox_partial_loglik(s, t, e, X, b - 1e-6 * u, w)) / 2e-6 for u in np.eye(len(b))])
        worst_grad = max(worst_grad, float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1.0))))
    worst_grid = 0.0
    for _ in range(5):
        s, t, e, X, w = small_problem(rng, 30)
        x = X[:, :1]
        fit = fit_cox(s, t, e, x, weights=w)
        best = grid_argmax(lambda b: cox_partial_loglik(s, t, e, x, [b], w))
        worst_grid = max(worst_grid, abs(fit.params[0] - best))
    s, t, e, X, _ = small_problem(rng, 80)
    inv = float(np.max(np.abs(fit_cox(s, t, e, X).params - fit_cox(s, t, e, X, weights=np.full(80, 4.2)).params)))
    ok = worst_grad <= 1e-6 and worst_grid <= 1e-4 and inv <= 1e-10
    report(6, ok, f"max rel gradient error {worst_grad:.1e}, grid-search gap {worst_grid:.1e}, "
                  f"constant-weight change {inv:.1e}")
    assert ok


def test_criterion_7_aalen_johansen(report):
    rng = np.random.default_rng(7)
    worst_km = worst_add = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 60))
        stop = rng.integers(1, 10, n).astype(float)
        status = rng.integers(0, 2, n)
        _, cif, surv = aalen_johansen(stop, status, 1)
        if cif.size:
            worst_km = max(worst_km, abs(cif[-1] - (1 - kaplan_meier(stop, status == 1))))
        status3 = rng.integers(0, 3, n)
        t1, f1, s = aalen_johansen(stop, status3, 1)
        _, f2, _ = aalen_johansen(stop, status3, 2)
        if t1.size:
            worst_add = max(worst_add, float(np.max(np.abs(f1 + f2 + s - 1))))
    five = make_cohort([(1, 0, None, 1.0, 1), (2, 0, None, 2.0, 2), (3, 0, None, 3.0, 0),
                        (4, 0, None, 4.0, 1), (5, 0, None, 20.0, 0)])
    ds = build_landmark_dataset(five, 0, 10)
    hand = max(abs(conditional_cif(ds, 1).at_window_end - 1 / 2), abs(conditional_cif(ds, 2).at_window_end - 1 / 5),
               abs(window_survival(ds) - 3 / 10))
    ok = worst_km <= 1e-15 and worst_add <= 1e-10 and hand <= 1e-12
    report(7, ok, f"max |AJ - (1 - KM)| {worst_km:.1e}, additivity {worst_add:.1e}, hand example {hand:.1e}")
    assert ok


def test_criterion_8_supermodel_saturation(report):
    c = simulate_cohort(harmful_model(), SimConfig(5000, 8, HARM_HORIZON))
    lms = [float(l) for l in range(2, 21, 2)]
    dss = [build_landmark_dataset(c, l, HARM_WINDOW) for l in lms]
    res = supermodel_fit(stack_landmarks(dss), SupermodelSpec(basis="indicator"))
    gap = float(np.max(np.abs(res.paf(np.array(lms)) - np.array([paf_lm(d).estimate for d in dss]))))
    ok = gap <= 1e-8
    report(8, ok, f"max |supermodel - per-landmark| {gap:.1e} over {len(lms)} landmarks")
    assert ok


def test_criterion_9_bootstrap_coverage(report):
    covered = cells = failed = 0
    for r in range(50):
        c = simulate_cohort(NULL_MODEL, SimConfig(2000, 90_000 + r, NULL_HORIZON))
        lms = choose_landmarks(c, NULL_WINDOW, min_count=20)
        s = bootstrap_series(c, lms, NULL_WINDOW, "LM_Miettinen", B=200, seed=90_000 + r)
        ok_cells = np.isfinite(s.ci_low) & np.isfinite(s.ci_high)
        failed += int(np.sum(~ok_cells))
        cells += int(ok_cells.sum())
        covered += int(np.sum((s.ci_low[ok_cells] <= 0) & (0 <= s.ci_high[ok_cells])))
    rate = covered / cells
    ok = rate >= 0.88
    report(9, ok, f"coverage {rate:.3f} over {cells} landmark x replication cells ({failed} without an interval)")
    assert ok


def _run_all_workflows(root, tag):
    out = root / tag
    cfg = {
        "simulate": {"model": harmful_model().to_dict(), "n": 1500, "horizon": HARM_HORIZON, "replications": 2,
                     "censoring_rate": 0.01},
        "window": HARM_WINDOW,
        "landmarks": {"grid": {"start": 0, "stop": 16, "spacing": 2}},
        "seed": 77,
        "methods": ["LM_Miettinen", "LM_Marginal", "PAF0_Pseudo", "PAF0_IPW", "Supermodel"],
        "bootstrap": {"B": 4},
        "threads": 1,
    }
    path = root / "run.yaml"
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
    assert cli_main(["simulate", "--config", str(path), "--out", str(out / "sim")]) == 0
    assert cli_main(["truth", "--config", str(path), "--out", str(out / "truth")]) == 0
    cfg["input"] = {"cohort": str(root / "a" / "sim" / "cohort_001.csv")}
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
    assert cli_main(["estimate", "--config", str(path), "--plot", "--out", str(out / "est")]) == 0
    assert cli_main(["bootstrap", "--config", str(path), "--out", str(out / "boot")]) == 0
    cfg["input"] = {"cohort": str(root / "a" / "sim" / "cohort_*.csv")}
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
    assert cli_main(["estimate", "--config", str(path), "--out", str(out / "reps")]) == 0
    assert cli_main(["report", str(out / "reps" / "estimates_cohort_*.csv"), "--out", str(out / "report")]) == 0
    return out


def test_criterion_10_determinism(report, tmp_path):
    a = _run_all_workflows(tmp_path, "a")
    b = _run_all_workflows(tmp_path, "b")
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.suffix in (".csv", ".svg"))
    differ = [str(f) for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    hashes_a = {f.parent.name: json.loads((a / f).read_text())["artifacts"] for f in
                (p.relative_to(a) for p in a.rglob("manifest.json"))}
    hashes_b = {f.parent.name: json.loads((b / f).read_text())["artifacts"] for f in
                (p.relative_to(b) for p in b.rglob("manifest.json"))}
    ok = not differ and len(files) >= 10 and hashes_a == hashes_b
    report(10, ok, f"{len(files)} CSV/SVG artifacts over 6 workflows, {len(differ)} differ"
                   + (f": {differ}" if differ else ""))
    assert ok
