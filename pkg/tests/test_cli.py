import json
import subprocess
import sys

import numpy as np
import numpy.testing as npt
import pandas as pd
import pytest
import yaml

from landmark_paf.cli import derived_seeds, main
from landmark_paf.cli.config import load_config
from landmark_paf.errors import ConfigError
from landmark_paf.event_data import write_cohort_csv

from conftest import harmful_model


def manifest_without_output(path):
    m = json.loads(path.read_text())
    m["config"].pop("output")
    return m


def write_config(path, **sections):
    path.write_text(yaml.safe_dump(sections, sort_keys=True))
    return str(path)


@pytest.fixture
def sim_config(tmp_path):
    return write_config(tmp_path / "sim.yaml",
                        simulate={"model": harmful_model().to_dict(), "n": 800, "horizon": 32.0},
                        window=8.0, landmarks={"grid": {"start": 0, "stop": 12, "spacing": 2}},
                        seed=11)


@pytest.fixture
def cohort_csv(tmp_path, sim_config):
    assert main(["simulate", "--config", sim_config, "--out", str(tmp_path / "sim")]) == 0
    return tmp_path / "sim" / "cohort_001.csv"


class TestSimulate:

    def test_single_subject(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml", simulate={"model": harmful_model().to_dict(), "n": 1,
                                                          "horizon": 32.0})
        assert main(["simulate", "--config", cfg, "--seed", "3", "--out", str(tmp_path / "o")]) == 0
        df = pd.read_csv(tmp_path / "o" / "cohort_001.csv")
        assert len(df) == 1

    def test_replications_and_oracle(self, tmp_path):
        from conftest import NULL_MODEL
        cfg = write_config(tmp_path / "c.yaml",
                           simulate={"model": NULL_MODEL.to_dict(), "n": 50, "horizon": 120.0,
                                     "replications": 3}, window=30.0, seed=1)
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
        files = sorted(p.name for p in (tmp_path / "o").glob("cohort_*.csv"))
        assert files == ["cohort_001.csv", "cohort_002.csv", "cohort_003.csv"]
        oracle = pd.read_csv(tmp_path / "o" / "oracle.csv")
        assert np.max(np.abs(oracle[["true_paf_at_landmark", "true_paf_window"]].to_numpy())) < 1e-9
        assert (tmp_path / "o" / "cohort_001.csv").read_bytes() != (tmp_path / "o" / "cohort_002.csv").read_bytes()

    def test_byte_identical(self, tmp_path, sim_config):
        for d in ("a", "b"):
            assert main(["simulate", "--config", sim_config, "--out", str(tmp_path / d)]) == 0
        for name in ("cohort_001.csv", "oracle.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        # the manifests differ only in the echoed output directory
        assert manifest_without_output(tmp_path / "a" / "manifest.json") == \
            manifest_without_output(tmp_path / "b" / "manifest.json")

    def test_seed_required(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml", simulate={"model": harmful_model().to_dict(), "n": 5,
                                                          "horizon": 32.0})
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_derived_seeds_prefix(self):
        assert derived_seeds(5, 3) == derived_seeds(5, 7)[:3]
        assert len(set(derived_seeds(5, 50))) == 50


class TestEstimate:

    def test_toy6_row(self, tmp_path, toy6):
        write_cohort_csv(toy6, tmp_path / "toy6.csv")
        cfg = write_config(tmp_path / "c.yaml", input={"cohort": "toy6.csv", "horizon": 20.0},
                           landmarks={"list": [1.0], "min_count": 1}, window=10.0)
        assert main(["estimate", "--config", cfg, "--method", "LM_Miettinen,LM_Marginal",
                     "--out", str(tmp_path / "o")]) == 0
        df = pd.read_csv(tmp_path / "o" / "estimates.csv", float_precision="round_trip")
        npt.assert_allclose(df["estimate"], [1 / 3, 1 / 3], atol=1e-10)
        assert list(df["method"]) == ["LM_Miettinen", "LM_Marginal"]
        assert list(df[["n_at_risk", "n_exposed", "n_cases"]].iloc[0]) == [6, 3, 3]

    def test_no_eligible_landmarks(self, tmp_path, toy6, capsys):
        write_cohort_csv(toy6, tmp_path / "toy6.csv")
        cfg = write_config(tmp_path / "c.yaml", input={"cohort": "toy6.csv"},
                           landmarks={"list": [1.0], "min_count": 20}, window=10.0)
        assert main(["estimate", "--config", cfg, "--out", str(tmp_path / "o")]) != 0
        assert "NoEligibleLandmarks" in capsys.readouterr().err

    def test_validation_error_row_number(self, tmp_path, capsys):
        p = tmp_path / "bad.csv"
        p.write_text("subject_id,entry_time,exposure_time,final_time,event_type\n1,0,,5,1\n2,0,9,5,1\n")
        cfg = write_config(tmp_path / "c.yaml", input={"cohort": "bad.csv"}, window=2.0)
        assert main(["estimate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        assert "row 3" in capsys.readouterr().err

    def test_plot_and_determinism(self, tmp_path, cohort_csv, sim_config):
        cfg = yaml.safe_load(open(sim_config))
        cfg["input"] = {"cohort": str(cohort_csv)}
        cfg["methods"] = ["LM_Miettinen", "PAF0_Pseudo", "Supermodel"]
        path = write_config(tmp_path / "est.yaml", **cfg)
        for d in ("a", "b"):
            assert main(["estimate", "--config", path, "--plot", "--out", str(tmp_path / d)]) == 0
        for name in ("estimates.csv", "estimates.svg", "estimates_supermodel_coefficients.csv",
                     "estimates_supermodel_wald.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
        assert manifest_without_output(tmp_path / "a" / "manifest.json") == \
            manifest_without_output(tmp_path / "b" / "manifest.json")
        svg = (tmp_path / "a" / "estimates.svg").read_text()
        assert svg.lstrip().startswith("<?xml") and "<svg" in svg
        manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
        assert set(manifest["artifacts"]) >= {"estimates.csv", "estimates.svg"}
        assert manifest["seed"] == 11

    def test_replication_summary(self, tmp_path):
        from conftest import NULL_MODEL
        cfg = write_config(tmp_path / "s.yaml",
                           simulate={"model": NULL_MODEL.to_dict(), "n": 3000, "horizon": 120.0,
                                     "replications": 3}, window=30.0, seed=2)
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "sim")]) == 0
        est = write_config(tmp_path / "e.yaml", input={"cohort": str(tmp_path / "sim" / "cohort_*.csv")},
                           landmarks={"list": [5, 10, 15]}, window=30.0)
        assert main(["estimate", "--config", est, "--out", str(tmp_path / "e")]) == 0
        summary = pd.read_csv(tmp_path / "e" / "summary.csv")
        assert list(summary.columns) == ["landmark", "method", "mean", "median", "q1", "q3", "n"]
        assert list(summary["n"]) == [3, 3, 3]
        per = [pd.read_csv(tmp_path / "e" / f"estimates_cohort_00{k}.csv") for k in (1, 2, 3)]
        npt.assert_allclose(summary["mean"], np.mean([p["estimate"] for p in per], axis=0))
        # the report command reproduces the summary from the per-cohort files
        assert main(["report", str(tmp_path / "e" / "estimates_cohort_*.csv"), "--out",
                     str(tmp_path / "r")]) == 0
        assert (tmp_path / "r" / "summary.csv").read_bytes() == (tmp_path / "e" / "summary.csv").read_bytes()


class TestBootstrap:

    def test_missing_seed(self, tmp_path, cohort_csv):
        cfg = write_config(tmp_path / "b.yaml", input={"cohort": str(cohort_csv)}, window=8.0,
                           landmarks={"list": [4.0]})
        assert main(["bootstrap", "--config", cfg, "-B", "5", "--out", str(tmp_path / "o")]) == 2
        with pytest.raises(ConfigError):
            load_config(cfg, {"seed": "abc"})

    def test_b2_deterministic(self, tmp_path, cohort_csv):
        cfg = write_config(tmp_path / "b.yaml", input={"cohort": str(cohort_csv)}, window=8.0,
                           landmarks={"list": [2.0, 4.0]}, methods=["LM_Miettinen", "LM_Marginal"])
        for d in ("a", "b"):
            assert main(["bootstrap", "--config", cfg, "-B", "2", "--seed", "9", "--threads", "1",
                         "--out", str(tmp_path / d)]) == 0
        a = (tmp_path / "a" / "bootstrap.csv").read_bytes()
        assert a == (tmp_path / "b" / "bootstrap.csv").read_bytes()
        df = pd.read_csv(tmp_path / "a" / "bootstrap.csv")
        assert np.all(df["ci_low"] <= df["estimate"]) and np.all(df["estimate"] <= df["ci_high"])
        assert "n_failed" in df.columns
        manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
        assert manifest["config"]["bootstrap"]["B"] == 2

    def test_threads_do_not_change_output(self, tmp_path, cohort_csv):
        cfg = write_config(tmp_path / "b.yaml", input={"cohort": str(cohort_csv)}, window=8.0,
                           landmarks={"list": [4.0]}, seed=4, bootstrap={"B": 4})
        assert main(["bootstrap", "--config", cfg, "--threads", "1", "--out", str(tmp_path / "a")]) == 0
        assert main(["bootstrap", "--config", cfg, "--threads", "2", "--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "a" / "bootstrap.csv").read_bytes() == (tmp_path / "b" / "bootstrap.csv").read_bytes()


class TestConfig:

    def test_env_threads(self, monkeypatch):
        monkeypatch.setenv("LANDMARK_PAF_THREADS", "3")
        assert load_config(None).threads == 3
        assert load_config(None, {"threads": 5}).threads == 5

    def test_unknown_key(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path / "c.yaml", windw=3))

    def test_both_landmark_forms(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path / "c.yaml", landmarks={"list": [1], "grid": {"spacing": 1}}))

    def test_nonpositive_window(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(write_config(tmp_path / "c.yaml", window=0))

    def test_flags_win(self, tmp_path):
        cfg = load_config(write_config(tmp_path / "c.yaml", seed=1, methods=["LM_Marginal"]),
                          {"seed": 2, "methods": "PAF0_IPW"})
        assert cfg.seed == 2 and [m.value for m in cfg.methods] == ["PAF0_IPW"]

    def test_module_entry_point(self, tmp_path):
        r = subprocess.run([sys.executable, "-m", "landmark_paf.cli", "--help"], capture_output=True, text=True)
        assert r.returncode == 0 and "bootstrap" in r.stdout
