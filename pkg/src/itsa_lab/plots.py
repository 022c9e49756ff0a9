"""Summary tables and charts over a tree of ``metrics.csv`` files."""

import csv
import logging
import math
from collections import defaultdict
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from matplotlib.figure import Figure

from .artifacts import read_metrics
from .data.constants import ShiftKind, Split
from .data.domains import MetricsRecord

logger = logging.getLogger(__name__)

SUMMARY_HEADER = ("suite", "method", "split", "metric", "n", "mean", "std")
DPI = 150


@dataclass(frozen=True)
class RunMetrics:
    """Final-epoch values of one run, keyed by (split, metric)."""

    suite: str
    method: str
    seed: int
    final: dict[tuple[str, str], float]
    history: list[MetricsRecord]


@dataclass(frozen=True)
class SummaryRow:
    suite: str
    method: str
    split: str
    metric: str
    n: int
    mean: float
    std: float


def suite_of(path: Path) -> str:
    """Suite encoded in a run directory name (``<suite>-<method>-seed<k>``)."""
    return path.parent.name.split("-", 1)[0]


def load_runs(metrics_dir: Path) -> list[RunMetrics]:
    """Every ``metrics.csv`` below ``metrics_dir``, one entry per file.

    Raises:
        FileNotFoundError: If the directory holds no metrics files.
    """
    paths = sorted(Path(metrics_dir).rglob("metrics.csv"))
    if not paths:
        raise FileNotFoundError(f"no metrics.csv files under {metrics_dir}")
    runs = []
    for path in paths:
        records = read_metrics(path)
        if not records:
            logger.warning(f"skipping empty {path}")
            continue
        last: dict[tuple[str, str], MetricsRecord] = {}
        for r in records:
            key = (r.split, r.metric)
            if key not in last or r.epoch >= last[key].epoch:
                last[key] = r
        runs.append(
            RunMetrics(
                suite=suite_of(path),
                method=records[0].method,
                seed=records[0].seed,
                final={key: r.value for key, r in last.items()},
                history=records,
            )
        )
    if not runs:
        raise FileNotFoundError(f"every metrics.csv under {metrics_dir} is empty")
    return runs


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    array = np.asarray(values, dtype=np.float64)
    std = float(array.std(ddof=1)) if len(array) > 1 else 0.0
    return float(array.mean()), std


def summarize(runs: Sequence[RunMetrics]) -> list[SummaryRow]:
    """Mean and sample std of final-epoch values across runs of a method."""
    groups: dict[tuple[str, str, str, str], list[float]] = defaultdict(list)
    for run in runs:
        for (split, metric), value in run.final.items():
            groups[(run.suite, run.method, split, metric)].append(value)
    rows = []
    for (suite, method, split, metric), values in sorted(groups.items()):
        mean, std = _mean_std(values)
        rows.append(SummaryRow(suite, method, split, metric, len(values), mean, std))
    return rows


def write_summary(path: Path, rows: Sequence[SummaryRow]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(SUMMARY_HEADER)
        for row in rows:
            writer.writerow(
                [row.suite, row.method, row.split, row.metric, row.n]
                + [repr(row.mean), repr(row.std)]
            )


def degradation_factors(
    runs: Sequence[RunMetrics],
) -> dict[str, dict[str, list[float]]]:
    """Per method and shift kind, EPE(kind) / EPE(clean) of every run."""
    factors: dict[str, dict[str, list[float]]] = defaultdict(lambda: defaultdict(list))
    for run in runs:
        clean = run.final.get((ShiftKind.CLEAN.value, "epe"))
        if not clean:
            continue
        for kind in ShiftKind:
            value = run.final.get((kind.value, "epe"))
            if kind != ShiftKind.CLEAN and value is not None:
                factors[run.method][kind.value].append(value / clean)
    return factors


def _grouped_bars(
    path: Path,
    groups: dict[str, dict[str, list[float]]],
    ylabel: str,
    title: str,
) -> Path:
    """One bar cluster per category, one bar per method; error bars need >1 run."""
    methods = sorted(groups)
    categories = sorted({c for per in groups.values() for c in per})
    fig = Figure(figsize=(max(6.0, 1.2 * len(categories) * len(methods)), 4.0))
    ax = fig.add_subplot()
    width = 0.8 / max(len(methods), 1)
    x = np.arange(len(categories))
    for i, method in enumerate(methods):
        stats = [_mean_std(groups[method].get(c, [math.nan])) for c in categories]
        means = [m for m, _ in stats]
        counts = [len(groups[method].get(c, [])) for c in categories]
        yerr = [s for _, s in stats] if max(counts) > 1 else None
        ax.bar(x + i * width, means, width, yerr=yerr, capsize=3, label=method)
    ax.set_xticks(x + width * (len(methods) - 1) / 2, categories)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    return path


def plot_digit_accuracy(path: Path, runs: Sequence[RunMetrics]) -> Path | None:
    groups: dict[str, dict[str, list[float]]] = defaultdict(lambda: defaultdict(list))
    for run in runs:
        for split in (Split.SOURCE_TEST.value, Split.TARGET_TEST.value):
            value = run.final.get((split, "top1"))
            if value is not None:
                groups[run.method][split].append(value)
    if not groups:
        return None
    return _grouped_bars(path, groups, "top-1 accuracy (%)", "Digit recognition")


def plot_stereo_degradation(path: Path, runs: Sequence[RunMetrics]) -> Path | None:
    factors = degradation_factors(runs)
    if not factors:
        return None
    return _grouped_bars(path, factors, "EPE(shift) / EPE(clean)", "Stereo degradation")


def plot_first_order_residual(path: Path, runs: Sequence[RunMetrics]) -> Path | None:
    fig = Figure(figsize=(5.0, 4.0))
    ax = fig.add_subplot()
    plotted = False
    for run in runs:
        points = sorted(
            (float(split.removeprefix("eps=")), value)
            for (split, metric), value in run.final.items()
            if split.startswith("eps=") and metric == "relative_residual"
        )
        if points:
            eps, residual = zip(*points)
            ax.loglog(eps, residual, marker="o", label=f"seed {run.seed}")
            plotted = True
    if not plotted:
        return None
    ax.set_xlabel("epsilon")
    ax.set_ylabel("relative residual")
    ax.set_title("First-order Fisher approximation")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    return path


def plot_loss_curves(path: Path, runs: Sequence[RunMetrics]) -> Path | None:
    fig = Figure(figsize=(6.0, 4.0))
    ax = fig.add_subplot()
    plotted = False
    for run in runs:
        curve = sorted(
            (r.epoch, r.value)
            for r in run.history
            if r.split == Split.TRAIN.value and r.metric == "loss"
        )
        if curve:
            epochs, losses = zip(*curve)
            label = f"{run.suite}/{run.method} seed {run.seed}"
            ax.plot(epochs, losses, marker=".", label=label)
            plotted = True
    if not plotted:
        return None
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    return path


def emit_plots(metrics_dir: Path, out_dir: Path | None = None) -> list[Path]:
    """Write ``summary.csv`` and every chart the metrics support.

    Args:
        metrics_dir: Searched recursively for ``metrics.csv`` files.
        out_dir: Destination; defaults to ``metrics_dir``.

    Returns:
        Paths written, summary first.

    Raises:
        FileNotFoundError: If no metrics are found.
    """
    runs = load_runs(metrics_dir)
    out = Path(out_dir) if out_dir is not None else Path(metrics_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = out / "summary.csv"
    write_summary(summary, summarize(runs))
    written = [summary]
    for name, plot in (
        ("digit_accuracy.png", plot_digit_accuracy),
        ("stereo_degradation.png", plot_stereo_degradation),
        ("first_order_residual.png", plot_first_order_residual),
        ("loss_curves.png", plot_loss_curves),
    ):
        path = plot(out / name, runs)
        if path is not None:
            written.append(path)
    logger.info(f"{len(runs)} runs summarized into {len(written)} files in {out}")
    return written
