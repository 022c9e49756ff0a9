"""Experiment orchestration: one directory of artifacts per (suite, method, seed).

Each run writes ``metrics.csv``, a ``config.toml`` snapshot that reproduces it
on its own, and ``checkpoint.bin`` when the run has parameters. Stereo runs
also write PFM/PNG disparity maps of a few held-out scenes.
"""

import logging
import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import artifacts, digits, fisher, gradcheck, stereo
from .config import ExperimentConfig, serialize_config
from .data.constants import DigitSource, Method, StereoMethod, Suite
from .data.domains import FloatArray, MetricsRecord
from .diffnet import Linear, Sequential
from .errors import InvariantError
from .parallel import worker_count

logger = logging.getLogger(__name__)

FISHER_AGREEMENT = 0.05
FISHER_AGREEMENT_SAMPLES = 100_000
FISHER_AGREEMENT_PROBES = 10_000
FISHER_INPUT_DIM = 3
LEMMA_INPUT_DIM = 4
PHOTOCONSISTENCY_TOL = 1e-6


@dataclass
class RunOutcome:
    """Artifacts and records of one finished run."""

    directory: Path
    records: list[MetricsRecord]
    parameters: dict[str, FloatArray] = field(default_factory=dict)


def run_directory(
    out_dir: Path, run_id: str, suite: Suite, method: str, seed: int
) -> Path:
    return Path(out_dir) / run_id / f"{Suite(suite).value}-{method}-seed{seed}"


def method_of(cfg: ExperimentConfig, suite: Suite) -> str:
    """Method column of a suite's records; fisher and gradcheck use the suite name."""
    suite = Suite(suite)
    if suite == Suite.DIGIT:
        return Method(cfg["digit.method"]).value
    if suite == Suite.STEREO:
        return StereoMethod(cfg["stereo.method"]).value
    return suite.value


def _write_run(
    directory: Path,
    cfg: ExperimentConfig,
    records: list[MetricsRecord],
    parameters: Mapping[str, FloatArray],
) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    artifacts.write_metrics(directory / "metrics.csv", records)
    (directory / "config.toml").write_text(serialize_config(cfg), encoding="utf-8")
    if parameters:
        artifacts.save_checkpoint(directory / "checkpoint.bin", parameters)
    logger.info(f"wrote {len(records)} metric rows to {directory}")


# ---------------------------------------------------------------------------
# Digit benchmark


def _digit_data(cfg: ExperimentConfig, workers: int) -> digits.DigitData:
    source = DigitSource(cfg["digit.source"])
    data_dir = Path(cfg["digit.data_dir"]) if cfg["digit.data_dir"] else None
    if source == DigitSource.MNIST and data_dir is None:
        logger.warning("digit.data_dir is empty; falling back to glyph digits")
        source = DigitSource.GLYPHS
    return digits.prepare_digit_data(
        source,
        cfg["digit.train_size"],
        cfg["digit.test_size"],
        cfg["digit.texture_seed"],
        data_dir,
        seed=cfg["digit.texture_seed"],
        workers=workers,
    )


def run_digit(
    cfg: ExperimentConfig, seed: int, data: digits.DigitData
) -> tuple[list[MetricsRecord], dict[str, FloatArray]]:
    """Train on source digits and report source/target top-1."""
    run_cfg = cfg.digit_run(seed)
    result = digits.train_digit(run_cfg, data.train)
    touched = set(result.access_log)
    for held_out in (data.source_test, data.target_test):
        if held_out.fingerprint in touched:
            raise InvariantError(
                f"training touched the {held_out.split} set ({held_out.fingerprint})"
            )
    records = result.records + digits.evaluate_digit(result, data, run_cfg)
    return records, result.model.parameters()


# ---------------------------------------------------------------------------
# Stereo pipeline


def _write_visualizations(
    directory: Path, net: stereo.StereoNet, cfg: ExperimentConfig
) -> None:
    scene = stereo.held_out_scene_config(cfg.scene())
    max_disparity = float(scene.max_disparity)
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(max(cfg["stereo.vis_samples"], 1)):
        sample = stereo.gen_scene(scene, i)
        error = stereo.photoconsistency_error(sample)
        if error > PHOTOCONSISTENCY_TOL:
            raise InvariantError(
                f"held-out scene {i} is not photoconsistent ({error:g})"
            )
        if i >= cfg["stereo.vis_samples"]:
            continue
        pred = net.predict(sample.left[None], sample.right[None])[0]
        artifacts.write_pfm(directory / f"sample{i}_pred.pfm", pred)
        artifacts.write_pfm(directory / f"sample{i}_gt.pfm", sample.disparity)
        artifacts.write_disparity_png(
            directory / f"sample{i}_pred.png", pred, max_disparity
        )
        artifacts.write_disparity_png(
            directory / f"sample{i}_gt.png", sample.disparity, max_disparity
        )
        artifacts.write_image_png(directory / f"sample{i}_left.png", sample.left)


def run_stereo(
    cfg: ExperimentConfig, seed: int, directory: Path, workers: int
) -> tuple[list[MetricsRecord], dict[str, FloatArray]]:
    """Train on clean procedural scenes, then score every configured shift."""
    run_cfg = cfg.stereo_run(seed)
    net, records = stereo.train_stereo(run_cfg, workers)
    results = stereo.evaluate_stereo(
        net,
        run_cfg.scene,
        cfg["stereo.test_size"],
        cfg.shifts(),
        seed=seed,
        eval_epsilon=cfg["stereo.eval_epsilon"],
        d1_threshold=cfg["eval.d1_threshold"],
        workers=workers,
        scp=cfg.scp("stereo.eval_epsilon"),
    )
    method = run_cfg.method.value
    for kind, scores in results.items():
        records += [
            MetricsRecord(
                cfg.run_id, method, seed, run_cfg.epochs, kind.value, name, value
            )
            for name, value in scores.items()
        ]
    _write_visualizations(directory, net, cfg)
    return records, net.parameters()


# ---------------------------------------------------------------------------
# Fisher oracles


def _relative_gap(a: float, b: float) -> float:
    return abs(a - b) / max(abs(b), 1e-12)


def run_fisher(
    cfg: ExperimentConfig, seed: int, workers: int
) -> tuple[list[MetricsRecord], dict[str, FloatArray]]:
    """Closed-form, Monte-Carlo and Hutchinson Fisher information of a linear
    Gaussian encoder, plus the first-order identity over the epsilon sweep."""
    rng = np.random.default_rng(seed)
    sigma = cfg["fisher.sigma"]
    n_samples = cfg["fisher.n_samples"]
    n_probes = cfg["fisher.n_probes"]
    rows: list[tuple[str, str, float]] = []

    a = rng.standard_normal((FISHER_INPUT_DIM, FISHER_INPUT_DIM))
    encoder = fisher.GaussianEncoder(
        Sequential([Linear.from_weights(a, name="enc")], (FISHER_INPUT_DIM,)), sigma
    )
    x = rng.standard_normal(FISHER_INPUT_DIM)
    closed = fisher.fisher_info_linear_closed(a, sigma)
    mc = fisher.fisher_info_mc(encoder, x, n_samples, seed, workers)
    hutchinson = fisher.rib_penalty(encoder, x[None], n_probes, seed)
    rows += [
        ("linear", "phi_closed", closed),
        ("linear", "phi_mc", mc.mean),
        ("linear", "phi_mc_stderr", mc.stderr),
        ("linear", "phi_hutchinson", hutchinson),
    ]
    gaps = {
        "mc": _relative_gap(mc.mean, closed),
        "hutchinson": _relative_gap(hutchinson, closed),
    }
    if n_samples >= FISHER_AGREEMENT_SAMPLES and n_probes >= FISHER_AGREEMENT_PROBES:
        for name, gap in gaps.items():
            if gap > FISHER_AGREEMENT:
                raise InvariantError(
                    f"{name} Fisher estimate is {100 * gap:.1f}% from the closed form"
                )
    else:
        logger.info(
            f"agreement check skipped below {FISHER_AGREEMENT_SAMPLES} samples / "
            f"{FISHER_AGREEMENT_PROBES} probes (gaps: "
            f"mc {gaps['mc']:.3f}, hutchinson {gaps['hutchinson']:.3f})"
        )

    slope = float(a[0, 0])
    rows += [
        ("scalar", "phi_closed", fisher.fisher_info_linear_closed(slope, sigma)),
        ("scalar", "phi_quadrature", fisher.fisher_info_quadrature(slope, sigma)),
    ]

    weights = rng.standard_normal((1, LEMMA_INPUT_DIM))
    lemma_encoder = fisher.GaussianEncoder(
        Sequential([Linear.from_weights(weights, name="lemma")], (LEMMA_INPUT_DIM,)),
        sigma,
    )
    x_lemma = rng.standard_normal(LEMMA_INPUT_DIM)
    u = weights[0] / np.linalg.norm(weights[0])
    residuals: list[tuple[float, float]] = []
    for epsilon in sorted(cfg.epsilons(), reverse=True):
        report = fisher.lemma1_check(
            lemma_encoder, x_lemma, u, epsilon, n_samples, seed
        )
        split = f"eps={epsilon:g}"
        rows += [
            (split, "psi", report.psi),
            (split, "lhs", report.lhs),
            (split, "tv_distance", report.tv_distance),
            (split, "variance_term", report.variance_term),
            (split, "variance_term_mc", report.variance_term_mc),
        ]
        if report.rhs is not None and report.relative_residual is not None:
            rows += [
                (split, "rhs", report.rhs),
                (split, "relative_residual", report.relative_residual),
            ]
            residuals.append((epsilon, report.relative_residual))
    for (eps_hi, res_hi), (eps_lo, res_lo) in zip(residuals, residuals[1:]):
        if not res_lo < res_hi:
            raise InvariantError(
                f"first-order residual did not shrink from eps={eps_hi:g} "
                f"({res_hi:.3e}) to eps={eps_lo:g} ({res_lo:.3e})"
            )

    records = [
        MetricsRecord(cfg.run_id, Suite.FISHER.value, seed, 0, split, metric, value)
        for split, metric, value in rows
    ]
    return records, {
        **encoder.mu_model.parameters(),
        **lemma_encoder.mu_model.parameters(),
    }


# ---------------------------------------------------------------------------
# Gradient suite


def run_gradcheck(cfg: ExperimentConfig, seed: int) -> list[MetricsRecord]:
    """Finite-difference checks of every primitive; one row set per primitive."""
    reports = gradcheck.run_gradient_suite(
        n_instances=cfg["gradcheck.instances"],
        h=cfg["gradcheck.h"],
        tol=cfg["gradcheck.tol"],
        seed=seed,
    )
    records = []
    for name, group in reports.items():
        worst = max(r.max_rel_err for r in group)
        passed = sum(r.passed for r in group)
        for metric, value in (
            ("max_rel_err", worst),
            ("passed", float(passed)),
            ("instances", float(len(group))),
        ):
            records.append(
                MetricsRecord(
                    cfg.run_id, Suite.GRADCHECK.value, seed, 0, name, metric, value
                )
            )
    return records


def _failed_primitives(records: list[MetricsRecord]) -> list[str]:
    counts: dict[str, dict[str, float]] = {}
    for r in records:
        counts.setdefault(r.split, {})[r.metric] = r.value
    return sorted(
        name
        for name, c in counts.items()
        if not math.isclose(c["passed"], c["instances"])
    )


# ---------------------------------------------------------------------------
# Dispatch


def run_experiment(
    cfg: ExperimentConfig, suite: Suite, out_dir: Path
) -> list[RunOutcome]:
    """Run every seed of ``suite`` and write its artifacts.

    Args:
        cfg: Validated configuration; ``run.seeds`` consecutive seeds starting
            at ``<suite>.seed`` are run one after another.
        suite: Which study to run.
        out_dir: Root directory; runs land in ``out_dir/<run.id>/``.

    Returns:
        One outcome per seed, in seed order.

    Raises:
        InvariantError: If an in-run invariant fails. A failing gradient
            suite still writes its metrics first.
    """
    suite = Suite(suite)
    workers = worker_count(cfg["run.workers"])
    method = method_of(cfg, suite)
    data = _digit_data(cfg, workers) if suite == Suite.DIGIT else None
    outcomes = []
    for seed in cfg.seeds(suite):
        directory = run_directory(out_dir, cfg.run_id, suite, method, seed)
        snapshot = cfg.with_overrides({f"{suite.value}.seed": seed, "run.seeds": 1})
        logger.info(f"run {directory.name} starting")
        parameters: dict[str, FloatArray] = {}
        failure: InvariantError | None = None
        if suite == Suite.DIGIT:
            assert data is not None
            records, parameters = run_digit(cfg, seed, data)
        elif suite == Suite.STEREO:
            records, parameters = run_stereo(cfg, seed, directory, workers)
        elif suite == Suite.FISHER:
            records, parameters = run_fisher(cfg, seed, workers)
        else:
            records = run_gradcheck(cfg, seed)
            failed = _failed_primitives(records)
            if failed:
                failure = InvariantError(f"gradient checks failed: {', '.join(failed)}")
        _write_run(directory, snapshot, records, parameters)
        if failure is not None:
            raise failure
        outcomes.append(RunOutcome(directory, records, parameters))
        logger.info(f"run {directory.name} finished")
    return outcomes
