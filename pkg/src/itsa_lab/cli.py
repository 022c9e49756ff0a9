"""Command-line entry point: ``itsa-lab digit|stereo|fisher|gradcheck|plots``."""

import argparse
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from .config import ExperimentConfig, load_config
from .data.constants import Method, StereoMethod, Suite
from .errors import ConfigError
from .harness import run_experiment
from .plots import emit_plots

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_FAILURE = 2

SUITE_METHODS: dict[Suite, tuple[str, ...]] = {
    Suite.DIGIT: tuple(m.value for m in Method),
    Suite.STEREO: tuple(m.value.replace("_", "-") for m in StereoMethod),
}


def _add_verbose(parser: argparse.ArgumentParser) -> None:
    # accepted after the sub-command too; absent means the top-level value
    parser.add_argument(
        "-v", "--verbose", action="store_true", default=argparse.SUPPRESS
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="itsa-lab",
        description="Shortcut-avoidance experiments: digits, stereo, Fisher oracles.",
    )
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="log per-step details"
    )
    commands = parser.add_subparsers(dest="command", required=True)
    for suite in Suite:
        sub = commands.add_parser(suite.value, help=f"run the {suite.value} suite")
        sub.add_argument("--config", type=Path, help="key = value config file")
        sub.add_argument("--seed", type=int, help=f"first seed ({suite.value}.seed)")
        sub.add_argument("--seeds", type=int, help="number of consecutive seeds")
        sub.add_argument("--out", type=Path, default=Path("out"), help="output root")
        sub.add_argument("--workers", type=int, help="worker threads (run.workers)")
        if suite in SUITE_METHODS:
            sub.add_argument("--method", choices=SUITE_METHODS[suite])
            sub.add_argument("--epsilon", type=float, help="itsa.epsilon")
            sub.add_argument("--lambda", dest="lam", type=float, help="itsa.lambda")
        _add_verbose(sub)
    plots = commands.add_parser("plots", help="summarize metrics and draw charts")
    plots.add_argument("metrics_dir", type=Path)
    plots.add_argument("--out", type=Path, help="destination (default: metrics_dir)")
    _add_verbose(plots)
    return parser


def overrides_from_args(args: argparse.Namespace, suite: Suite) -> dict[str, Any]:
    """Config keys set by command-line flags."""
    overrides: dict[str, Any] = {}
    if args.seed is not None:
        overrides[f"{suite.value}.seed"] = args.seed
    if args.seeds is not None:
        overrides["run.seeds"] = args.seeds
    if args.workers is not None:
        overrides["run.workers"] = args.workers
    if getattr(args, "method", None) is not None:
        overrides[f"{suite.value}.method"] = args.method.replace("-", "_")
    if getattr(args, "epsilon", None) is not None:
        overrides["itsa.epsilon"] = args.epsilon
    if getattr(args, "lam", None) is not None:
        overrides["itsa.lambda"] = args.lam
    return overrides


def resolve_config(args: argparse.Namespace, suite: Suite) -> ExperimentConfig:
    try:
        cfg = load_config(args.config)
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from e
    return cfg.with_overrides(overrides_from_args(args, suite))


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if args.command == "plots":
        try:
            written = emit_plots(args.metrics_dir, args.out)
        except (OSError, ValueError) as e:
            logger.error(f"plots: {e}")
            return EXIT_FAILURE
        for path in written:
            print(path)
        return EXIT_OK

    suite = Suite(args.command)
    try:
        cfg = resolve_config(args, suite)
    except ConfigError as e:
        logger.error(f"config error: {e}")
        return EXIT_CONFIG
    try:
        outcomes = run_experiment(cfg, suite, args.out)
    except ConfigError as e:
        logger.error(f"config error: {e}")
        return EXIT_CONFIG
    except (ValueError, RuntimeError, OSError) as e:
        logger.error(f"{suite.value} run {cfg.run_id} failed: {type(e).__name__}: {e}")
        return EXIT_FAILURE
    for outcome in outcomes:
        print(outcome.directory)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
