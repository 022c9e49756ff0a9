#!/usr/bin/env python3
"""Reproduce the digit, stereo-shift and ablation studies plus the tuning sweeps.

Usage: python scripts/reproduce.py [--config base.cfg] [--out out] [--study all]
"""

import argparse
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

# Import business logic from itsa_lab package
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))
from itsa_lab import plots
from itsa_lab.config import ExperimentConfig, load_config
from itsa_lab.data.constants import ShiftKind, Split, Suite
from itsa_lab.digits import sweep_values
from itsa_lab.errors import ConfigError
from itsa_lab.harness import run_experiment

STUDY_SEEDS = 3
DIGIT_METHODS = ("erm", "ib", "rib", "itsa")
STEREO_METHODS = ("baseline", "scp_only", "itsa")
SWEEP_LAMBDAS = (0.01, 0.1, 1.0)
SWEEP_EPSILONS = (0.1, 0.5, 1.0)
BETAS = (1e-2, 1e-3, 1e-4)
STUDIES = ("digit", "stereo", "sweep", "beta", "all")

Lookup = dict[tuple[str, str, str, str], plots.SummaryRow]


def load_base_config(path: Path | None) -> ExperimentConfig:
    """Read the base config, exiting with status 1 on errors."""
    try:
        return load_config(path)
    except (ConfigError, OSError) as e:
        print(f"❌ Config error: {e}")
        sys.exit(1)


def run_suite(cfg: ExperimentConfig, suite: Suite, out: Path) -> None:
    """Run one configured suite, exiting with status 2 on failures."""
    try:
        outcomes = run_experiment(cfg, suite, out)
    except ConfigError as e:
        print(f"❌ Config error: {e}")
        sys.exit(1)
    except (ValueError, RuntimeError, OSError) as e:
        print(f"❌ {suite.value} run {cfg.run_id} failed: {e}")
        sys.exit(2)
    print(f"✓ {suite.value} {cfg.run_id}: {len(outcomes)} run(s)")


def summary_lookup(rows: Sequence[plots.SummaryRow]) -> Lookup:
    """Summary rows keyed by (suite, method, split, metric)."""
    return {(r.suite, r.method, r.split, r.metric): r for r in rows}


def mean_std(lookup: Lookup, key: tuple[str, str, str, str]) -> str:
    row = lookup.get(key)
    if row is None:
        return "-"
    if row.n == 1:
        return f"{row.mean:.2f}"
    return f"{row.mean:.2f} ± {row.std:.2f}"


def format_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    """Plain-text table with left-aligned, padded columns."""
    widths = [
        max(len(str(cell)) for cell in column) for column in zip(header, *rows)
    ]
    lines = [
        "  ".join(str(cell).ljust(w) for cell, w in zip(line, widths)).rstrip()
        for line in (header, *rows)
    ]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def digit_rows(lookup: Lookup) -> list[list[str]]:
    """Source and target top-1 per method."""
    return [
        [
            method,
            mean_std(lookup, ("digit", method, Split.SOURCE_TEST.value, "top1")),
            mean_std(lookup, ("digit", method, Split.TARGET_TEST.value, "top1")),
        ]
        for method in DIGIT_METHODS
        if ("digit", method, Split.SOURCE_TEST.value, "top1") in lookup
    ]


def stereo_rows(
    lookup: Lookup, factors: dict[str, dict[str, list[float]]], shifts: Sequence[str]
) -> list[list[str]]:
    """Clean EPE, then EPE and degradation factor under each shift."""
    rows = []
    for method in STEREO_METHODS:
        if ("stereo", method, ShiftKind.CLEAN.value, "epe") not in lookup:
            continue
        clean = mean_std(lookup, ("stereo", method, ShiftKind.CLEAN.value, "epe"))
        row = [method, clean]
        for kind in shifts:
            ratios = factors.get(method, {}).get(kind, [])
            factor = f"x{sum(ratios) / len(ratios):.2f}" if ratios else "-"
            epe = mean_std(lookup, ("stereo", method, kind, "epe"))
            row.append(f"{epe} ({factor})")
        rows.append(row)
    return rows


def ablation_rows(lookup: Lookup, shifts: Sequence[str]) -> list[list[str]]:
    """D1 on the clean and every shifted domain per method."""
    return [
        [method]
        + [
            mean_std(lookup, ("stereo", method, kind, "d1"))
            for kind in (ShiftKind.CLEAN.value, *shifts)
        ]
        for method in STEREO_METHODS
        if ("stereo", method, ShiftKind.CLEAN.value, "d1") in lookup
    ]


def _mean(lookup: Lookup, key: tuple[str, str, str, str]) -> float | None:
    row = lookup.get(key)
    return None if row is None else row.mean


def trend_report(
    lookup: Lookup, factors: dict[str, dict[str, list[float]]], shifts: Sequence[str]
) -> list[str]:
    """Check the expected orderings; one line per check that has data."""
    lines = []

    def check(ok: bool, message: str) -> None:
        lines.append(f"{'✓' if ok else '❌'} {message}")

    target = {
        m: _mean(lookup, ("digit", m, Split.TARGET_TEST.value, "top1"))
        for m in DIGIT_METHODS
    }
    source = {
        m: _mean(lookup, ("digit", m, Split.SOURCE_TEST.value, "top1"))
        for m in DIGIT_METHODS
    }
    for method, value in source.items():
        if value is not None:
            check(value >= 95.0, f"{method} source top-1 {value:.1f} >= 95")
    erm, itsa, ib = target["erm"], target["itsa"], target["ib"]
    if erm is not None and itsa is not None:
        check(itsa >= erm + 5.0, f"itsa target {itsa:.1f} >= erm target {erm:.1f} + 5")
    if erm is not None and ib is not None:
        check(ib < erm, f"ib target {ib:.1f} < erm target {erm:.1f}")

    def factor(method: str, kind: str) -> float | None:
        ratios = factors.get(method, {}).get(kind, [])
        return sum(ratios) / len(ratios) if ratios else None

    for kind in ("gray_left", "acj"):
        base, ours = factor("baseline", kind), factor("itsa", kind)
        if base is not None and ours is not None:
            check(
                base > ours,
                f"{kind} degradation baseline x{base:.2f} > itsa x{ours:.2f}",
            )

    shifted = [k for k in shifts if k != ShiftKind.CLEAN.value]
    d1: dict[str, float] = {}
    for method in STEREO_METHODS:
        values = [_mean(lookup, ("stereo", method, k, "d1")) for k in shifted]
        if shifted and all(v is not None for v in values):
            d1[method] = sum(v for v in values if v is not None) / len(values)
    if len(d1) == len(STEREO_METHODS):
        check(
            d1["itsa"] <= d1["scp_only"] <= d1["baseline"],
            f"shifted D1 itsa {d1['itsa']:.2f} <= scp_only {d1['scp_only']:.2f} "
            f"<= baseline {d1['baseline']:.2f}",
        )
    return lines


def run_method_grid(
    base: ExperimentConfig,
    suite: Suite,
    run_id: str,
    methods: Sequence[str],
    out: Path,
    seeds: int,
) -> None:
    for method in methods:
        cfg = base.with_overrides(
            {"run.id": run_id, "run.seeds": seeds, f"{suite.value}.method": method}
        )
        run_suite(cfg, suite, out)


def digit_study(base: ExperimentConfig, out: Path, seeds: int) -> Lookup:
    """All four digit methods, source-only training."""
    print("\n🔢 Digit study")
    run_method_grid(base, Suite.DIGIT, "digits", DIGIT_METHODS, out, seeds)
    lookup = summary_lookup(plots.summarize(plots.load_runs(out / "digits")))
    print(format_table(["method", "source top-1", "target top-1"], digit_rows(lookup)))
    return lookup


def stereo_study(
    base: ExperimentConfig, out: Path, seeds: int
) -> tuple[Lookup, dict[str, dict[str, list[float]]]]:
    """Baseline, SCP-only and full ITSA stereo training, scored under every shift."""
    print("\n🎥 Stereo study")
    run_method_grid(base, Suite.STEREO, "stereo", STEREO_METHODS, out, seeds)
    runs = plots.load_runs(out / "stereo")
    lookup = summary_lookup(plots.summarize(runs))
    factors = plots.degradation_factors(runs)
    shifts = [k.value for k in base.shifts() if k != ShiftKind.CLEAN]
    print(
        format_table(
            ["method", "clean EPE", *[f"{k} EPE" for k in shifts]],
            stereo_rows(lookup, factors, shifts),
        )
    )
    print("\nD1 (%) by domain")
    print(format_table(["method", "clean", *shifts], ablation_rows(lookup, shifts)))
    return lookup, factors


def lambda_epsilon_sweep(base: ExperimentConfig, out: Path) -> tuple[float, float]:
    """Digit ITSA over the lambda x epsilon grid, selected on source validation."""
    print("\n🎚  Lambda / epsilon sweep (digit itsa, selected on validation top-1)")
    grid = [(lam, eps) for lam in SWEEP_LAMBDAS for eps in SWEEP_EPSILONS]
    rows: list[list[str]] = []
    scores: list[float] = []
    for lam, eps in grid:
        run_id = f"sweep-lambda{lam:g}-eps{eps:g}"
        overrides: dict[str, Any] = {
            "run.id": run_id,
            "run.seeds": 1,
            "digit.method": "itsa",
            "itsa.lambda": lam,
            "itsa.epsilon": eps,
        }
        run_suite(base.with_overrides(overrides), Suite.DIGIT, out)
        lookup = summary_lookup(plots.summarize(plots.load_runs(out / run_id)))
        val = lookup[("digit", "itsa", Split.VAL.value, "top1")].mean
        scores.append(val)
        target = mean_std(lookup, ("digit", "itsa", Split.TARGET_TEST.value, "top1"))
        rows.append([f"{lam:g}", f"{eps:g}", f"{val:.2f}", target])
    print(format_table(["lambda", "epsilon", "val top-1", "target top-1"], rows))
    best = max(range(len(grid)), key=lambda i: scores[i])
    print(f"✓ Selected lambda={grid[best][0]:g}, epsilon={grid[best][1]:g}")
    return grid[best]


def beta_sweep(base: ExperimentConfig, out: Path) -> dict[str, float]:
    """IB and RIB weights chosen from three values on source validation top-1."""
    print("\n🎚  IB / RIB beta sweep")
    chosen = {}
    for method, key in (("ib", "ib.beta"), ("rib", "rib.beta_fisher")):
        scores = []
        for beta in BETAS:
            run_id = f"sweep-{method}-beta{beta:g}"
            cfg = base.with_overrides(
                {"run.id": run_id, "run.seeds": 1, "digit.method": method, key: beta}
            )
            run_suite(cfg, Suite.DIGIT, out)
            lookup = summary_lookup(plots.summarize(plots.load_runs(out / run_id)))
            scores.append(lookup[("digit", method, Split.VAL.value, "top1")].mean)
        chosen[method] = sweep_values(BETAS, scores)
        print(f"✓ {method}: {key} = {chosen[method]:g}")
    return chosen


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path, help="base key = value config")
    parser.add_argument("--out", type=Path, default=Path("out"))
    parser.add_argument("--study", choices=STUDIES, default="all")
    parser.add_argument("--seeds", type=int, default=STUDY_SEEDS)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING)

    base = load_base_config(args.config)
    lookup: Lookup = {}
    factors: dict[str, dict[str, list[float]]] = {}
    if args.study in ("digit", "all"):
        lookup.update(digit_study(base, args.out, args.seeds))
    if args.study in ("stereo", "all"):
        stereo_lookup, factors = stereo_study(base, args.out, args.seeds)
        lookup.update(stereo_lookup)
    if args.study in ("sweep", "all"):
        lambda_epsilon_sweep(base, args.out)
    if args.study in ("beta", "all"):
        beta_sweep(base, args.out)

    shifts = [k.value for k in base.shifts() if k != ShiftKind.CLEAN]
    report = trend_report(lookup, factors, shifts)
    if report:
        print("\n📋 Expected trends")
        print("\n".join(report))
    print(f"\n✅ Artifacts in {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
