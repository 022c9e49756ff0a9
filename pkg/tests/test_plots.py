"""Tests for the summary table and charts."""

import csv

import pytest

from itsa_lab import plots
from itsa_lab.artifacts import write_metrics
from itsa_lab.data.domains import MetricsRecord


def write_run(root, suite, method, seed, rows):
    directory = root / "study" / f"{suite}-{method}-seed{seed}"
    directory.mkdir(parents=True)
    write_metrics(
        directory / "metrics.csv",
        [
            MetricsRecord("study", method, seed, epoch, split, metric, value)
            for epoch, split, metric, value in rows
        ],
    )


@pytest.fixture
def metrics_dir(tmp_path):
    root = tmp_path / "out"
    for seed, target in ((0, 50.0), (1, 60.0)):
        write_run(
            root,
            "digit",
            "erm",
            seed,
            [
                (1, "train", "loss", 2.0),
                (2, "train", "loss", 1.0),
                (1, "val", "top1", 70.0),
                (2, "val", "top1", 80.0 + seed),
                (2, "source_test", "top1", 98.0),
                (2, "target_test", "top1", target),
            ],
        )
    write_run(
        root,
        "stereo",
        "itsa",
        0,
        [
            (1, "train", "loss", 0.5),
            (1, "clean", "epe", 2.0),
            (1, "acj", "epe", 3.0),
            (1, "gray_left", "epe", 2.5),
        ],
    )
    write_run(
        root,
        "fisher",
        "fisher",
        0,
        [
            (0, "eps=0.1", "relative_residual", 0.1),
            (0, "eps=0.01", "relative_residual", 0.001),
        ],
    )
    return root


class TestLoadRuns:
    """Tests for load_runs()."""

    def test_final_epoch_values(self, metrics_dir):
        """Each run keeps the last epoch of every (split, metric)."""
        runs = plots.load_runs(metrics_dir)
        assert [(r.suite, r.method, r.seed) for r in runs] == [
            ("digit", "erm", 0),
            ("digit", "erm", 1),
            ("fisher", "fisher", 0),
            ("stereo", "itsa", 0),
        ]
        assert runs[1].final[("val", "top1")] == 81.0
        assert runs[1].final[("train", "loss")] == 1.0

    def test_no_metrics(self, tmp_path):
        """A directory without metrics files is an error."""
        with pytest.raises(FileNotFoundError, match="no metrics.csv"):
            plots.load_runs(tmp_path)

    def test_only_empty_files(self, tmp_path):
        """Header-only files give nothing to summarize."""
        write_run(tmp_path, "digit", "erm", 0, [])
        with pytest.raises(FileNotFoundError, match="empty"):
            plots.load_runs(tmp_path)


class TestSummary:
    """Tests for summarize() and degradation_factors()."""

    def test_mean_and_sample_std_across_seeds(self, metrics_dir):
        """Seeds of one method are pooled; a single run has std 0."""
        rows = {
            (r.suite, r.method, r.split, r.metric): r
            for r in plots.summarize(plots.load_runs(metrics_dir))
        }
        target = rows[("digit", "erm", "target_test", "top1")]
        assert (target.n, target.mean) == (2, 55.0)
        assert target.std == pytest.approx(7.0710678, rel=1e-6)
        clean = rows[("stereo", "itsa", "clean", "epe")]
        assert (clean.n, clean.mean, clean.std) == (1, 2.0, 0.0)

    def test_degradation_relative_to_clean(self, metrics_dir):
        """Shifted EPE is divided by the clean EPE of the same run."""
        factors = plots.degradation_factors(plots.load_runs(metrics_dir))
        assert factors["itsa"]["acj"] == [1.5]
        assert factors["itsa"]["gray_left"] == [1.25]
        assert "erm" not in factors


class TestEmitPlots:
    """Tests for emit_plots()."""

    def test_writes_summary_and_charts(self, metrics_dir, tmp_path):
        """summary.csv comes first, followed by every supported chart."""
        out = tmp_path / "plots"
        written = plots.emit_plots(metrics_dir, out)
        assert [p.name for p in written] == [
            "summary.csv",
            "digit_accuracy.png",
            "stereo_degradation.png",
            "first_order_residual.png",
            "loss_curves.png",
        ]
        assert all(p.stat().st_size > 0 for p in written)
        with (out / "summary.csv").open(newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            assert tuple(next(reader)) == plots.SUMMARY_HEADER
            assert ["digit", "erm", "target_test", "top1", "2", "55.0"] in [
                row[:6] for row in reader
            ]

    def test_defaults_to_metrics_dir(self, tmp_path):
        """Without a destination, outputs land next to the metrics."""
        write_run(tmp_path, "digit", "erm", 0, [(1, "val", "top1", 10.0)])
        written = plots.emit_plots(tmp_path)
        assert written == [tmp_path / "summary.csv"]
