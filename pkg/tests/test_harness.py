"""Tests for experiment dispatch and run artifacts."""

import numpy as np
import pytest

from itsa_lab import artifacts, digits, gradcheck, harness
from itsa_lab.config import ExperimentConfig, parse_config
from itsa_lab.data.constants import METRICS_HEADER, Suite
from itsa_lab.data.domains import GradCheckReport
from itsa_lab.errors import InvariantError

DIGIT = {
    "run.id": "t",
    "digit.source": "glyphs",
    "digit.train_size": 20,
    "digit.test_size": 10,
    "digit.epochs": 1,
    "digit.batch_size": 8,
    "digit.val_fraction": 0.2,
    "digit.latent_dim": 8,
}

STEREO = {
    "run.id": "t",
    "scene.height": 16,
    "scene.width": 32,
    "scene.max_disparity": 8,
    "scene.min_layers": 2,
    "scene.max_layers": 3,
    "stereo.stride": 2,
    "stereo.feature_channels": 4,
    "stereo.train_size": 2,
    "stereo.test_size": 1,
    "stereo.batch_size": 2,
    "stereo.epochs": 1,
    "stereo.vis_samples": 1,
}

FISHER = {"run.id": "t", "fisher.n_samples": 2000, "fisher.n_probes": 200}


def config(values, **extra):
    return ExperimentConfig().with_overrides({**values, **extra})


class TestRunDirectory:
    """Tests for run naming."""

    def test_layout(self, tmp_path):
        """Runs land in <out>/<run_id>/<suite>-<method>-seed<k>."""
        path = harness.run_directory(tmp_path, "study", Suite.STEREO, "itsa", 3)
        assert path == tmp_path / "study" / "stereo-itsa-seed3"

    def test_method_column(self):
        """Training suites use their method; the oracles use the suite name."""
        cfg = parse_config("digit.method = rib\nstereo.method = scp_only\n")
        assert harness.method_of(cfg, Suite.DIGIT) == "rib"
        assert harness.method_of(cfg, Suite.STEREO) == "scp_only"
        assert harness.method_of(cfg, Suite.FISHER) == "fisher"
        assert harness.method_of(cfg, Suite.GRADCHECK) == "gradcheck"


class TestDigitRuns:
    """Tests for the digit suite."""

    def test_one_directory_per_seed(self, tmp_path):
        """Every seed writes metrics, a config snapshot and a checkpoint."""
        cfg = config(DIGIT, **{"digit.method": "itsa", "run.seeds": 2})
        outcomes = harness.run_experiment(cfg, Suite.DIGIT, tmp_path)
        assert [o.directory.name for o in outcomes] == [
            "digit-itsa-seed0",
            "digit-itsa-seed1",
        ]
        for seed, outcome in enumerate(outcomes):
            files = {p.name for p in outcome.directory.iterdir()}
            assert files == {"metrics.csv", "config.toml", "checkpoint.bin"}
            records = artifacts.read_metrics(outcome.directory / "metrics.csv")
            assert records == outcome.records
            assert {r.seed for r in records} == {seed}
            splits = {(r.split, r.metric) for r in records}
            assert ("source_test", "top1") in splits
            assert ("target_test", "top1") in splits

    def test_config_snapshot_reproduces_the_run(self, tmp_path):
        """The snapshot pins the seed and a single-seed run."""
        cfg = config(DIGIT, **{"run.seeds": 2, "digit.seed": 5})
        outcome = harness.run_experiment(cfg, Suite.DIGIT, tmp_path)[1]
        text = (outcome.directory / "config.toml").read_text(encoding="utf-8")
        snapshot = parse_config(text)
        assert snapshot["digit.seed"] == 6
        assert snapshot["run.seeds"] == 1
        again = harness.run_experiment(snapshot, Suite.DIGIT, tmp_path / "again")[0]
        assert again.records == outcome.records

    def test_checkpoint_holds_the_trained_parameters(self, tmp_path):
        """checkpoint.bin restores the final model parameters."""
        outcome = harness.run_experiment(config(DIGIT), Suite.DIGIT, tmp_path)[0]
        saved = artifacts.load_checkpoint(outcome.directory / "checkpoint.bin")
        assert set(saved) == set(outcome.parameters)
        for name, array in outcome.parameters.items():
            np.testing.assert_array_equal(saved[name], array)

    def test_touching_a_test_set_is_an_invariant_failure(self, tmp_path, monkeypatch):
        """A training loop that reads held-out data fails the run."""
        real = digits.train_digit

        def leaky(run_cfg, train, *args, **kwargs):
            result = real(run_cfg, train, *args, **kwargs)
            data = harness._digit_data(config(DIGIT), 1)
            result.access_log.append(data.target_test.fingerprint)
            return result

        monkeypatch.setattr(digits, "train_digit", leaky)
        with pytest.raises(InvariantError, match="target_test"):
            harness.run_experiment(config(DIGIT), Suite.DIGIT, tmp_path)

    def test_empty_data_dir_falls_back_to_glyphs(self, tmp_path, caplog):
        """The mnist source without a directory trains on glyph digits."""
        cfg = config(DIGIT, **{"digit.source": "mnist"})
        outcome = harness.run_experiment(cfg, Suite.DIGIT, tmp_path)[0]
        assert "falling back to glyph digits" in caplog.text
        assert outcome.records


class TestStereoRuns:
    """Tests for the stereo suite."""

    def test_artifacts_and_shift_records(self, tmp_path):
        """Metrics cover every shift and previews are written."""
        cfg = config(STEREO, **{"stereo.method": "itsa"})
        outcome = harness.run_experiment(cfg, Suite.STEREO, tmp_path)[0]
        assert outcome.directory.name == "stereo-itsa-seed0"
        files = {p.name for p in outcome.directory.iterdir()}
        assert {
            "metrics.csv",
            "config.toml",
            "checkpoint.bin",
            "sample0_pred.pfm",
            "sample0_gt.pfm",
            "sample0_pred.png",
            "sample0_gt.png",
            "sample0_left.png",
        } <= files
        assert "sample1_pred.pfm" not in files
        evaluated = {r.split for r in outcome.records if r.metric == "epe"}
        assert evaluated == {"clean", "acj", "gray_left", "gray_right", "scp"}
        pred = artifacts.read_pfm(outcome.directory / "sample0_pred.pfm")
        assert pred.shape == (16, 32)

    def test_records_use_the_run_schema(self, tmp_path):
        """Every row carries the run id, method and seed."""
        cfg = config(STEREO, **{"stereo.seed": 2})
        outcome = harness.run_experiment(cfg, Suite.STEREO, tmp_path)[0]
        assert {(r.run_id, r.method, r.seed) for r in outcome.records} == {
            ("t", "baseline", 2)
        }


class TestOracleRuns:
    """Tests for the Fisher and gradient suites."""

    def test_fisher_rows(self, tmp_path):
        """Closed form, estimates and one row block per epsilon."""
        outcome = harness.run_experiment(config(FISHER), Suite.FISHER, tmp_path)[0]
        rows = {(r.split, r.metric): r.value for r in outcome.records}
        assert {"phi_closed", "phi_mc", "phi_mc_stderr", "phi_hutchinson"} <= {
            metric for split, metric in rows if split == "linear"
        }
        assert rows[("scalar", "phi_closed")] == pytest.approx(
            rows[("scalar", "phi_quadrature")], rel=1e-6
        )
        residuals = [
            rows[(f"eps={eps:g}", "relative_residual")] for eps in (0.1, 0.03, 0.01)
        ]
        assert residuals == sorted(residuals, reverse=True)
        assert (outcome.directory / "checkpoint.bin").exists()

    def test_fisher_agreement_is_checked_at_full_size(self, tmp_path, monkeypatch):
        """A Monte-Carlo estimate far from the closed form fails the run."""
        real = harness.fisher.fisher_info_mc

        def biased(*args, **kwargs):
            estimate = real(*args, **kwargs)
            return type(estimate)(**{**vars(estimate), "mean": 2 * estimate.mean})

        monkeypatch.setattr(harness.fisher, "fisher_info_mc", biased)
        monkeypatch.setattr(harness, "FISHER_AGREEMENT_SAMPLES", 2000)
        monkeypatch.setattr(harness, "FISHER_AGREEMENT_PROBES", 200)
        with pytest.raises(InvariantError, match="mc Fisher estimate"):
            harness.run_experiment(config(FISHER), Suite.FISHER, tmp_path)

    def test_gradcheck_rows_without_checkpoint(self, tmp_path):
        """One row set per primitive; nothing to checkpoint."""
        cfg = config({"run.id": "t", "gradcheck.instances": 1})
        outcome = harness.run_experiment(cfg, Suite.GRADCHECK, tmp_path)[0]
        assert not (outcome.directory / "checkpoint.bin").exists()
        names = {r.split for r in outcome.records}
        assert set(gradcheck.PRIMITIVES) <= names
        passed = {r.split: r.value for r in outcome.records if r.metric == "passed"}
        assert set(passed.values()) == {1.0}

    def test_failed_gradcheck_still_writes_metrics(self, tmp_path, monkeypatch):
        """The failing primitive is named after its metrics are on disk."""

        def suite(**kwargs):
            good = GradCheckReport(0.0, {}, 1e-4)
            bad = GradCheckReport(1.0, {}, 1e-4)
            return {"linear": [good], "conv2d": [good, bad]}

        monkeypatch.setattr(gradcheck, "run_gradient_suite", suite)
        cfg = config({"run.id": "t"})
        with pytest.raises(InvariantError, match="conv2d"):
            harness.run_experiment(cfg, Suite.GRADCHECK, tmp_path)
        metrics = tmp_path / "t" / "gradcheck-gradcheck-seed0" / "metrics.csv"
        header = metrics.read_text(encoding="utf-8").splitlines()[0]
        assert header == ",".join(METRICS_HEADER)
        rows = artifacts.read_metrics(metrics)
        assert {(r.split, r.metric, r.value) for r in rows} >= {
            ("conv2d", "passed", 1.0),
            ("conv2d", "instances", 2.0),
        }
