"""Flat ``key = value`` experiment configuration.

Values are TOML scalars (parsed with tomlkit); string keys also accept bare
words. Every key has a default, unknown keys are rejected and the canonical
text form lists all keys sorted.
"""

import difflib
import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomlkit
from tomlkit.exceptions import ParseError

from .data.constants import (
    DigitSource,
    Method,
    Reduction,
    Scalarization,
    ShiftKind,
    StereoMethod,
    Suite,
    TextureKind,
)
from .data.domains import (
    DigitRunConfig,
    IbConfig,
    SceneConfig,
    ScpConfig,
    StereoRunConfig,
)
from .errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Key:
    """Type, default and (optional) allowed values of one config key."""

    kind: type
    default: Any
    choices: tuple[str, ...] | None = None
    minimum: float | None = None
    maximum: float | None = None  # exclusive


def _values(enum: Any) -> tuple[str, ...]:
    return tuple(member.value for member in enum)


KEYS: dict[str, Key] = {
    "run.id": Key(str, "itsa"),
    "run.seeds": Key(int, 1, minimum=1),
    "run.workers": Key(int, 1, minimum=1),
    "digit.method": Key(str, Method.ERM.value, _values(Method)),
    "digit.seed": Key(int, 0, minimum=0),
    "digit.epochs": Key(int, 3, minimum=1),
    "digit.batch_size": Key(int, 64, minimum=1),
    "digit.lr": Key(float, 1e-3),
    "digit.train_size": Key(int, 10000, minimum=1),
    "digit.test_size": Key(int, 2000, minimum=1),
    "digit.val_fraction": Key(float, 0.1, minimum=0.0, maximum=1.0),
    "digit.source": Key(str, DigitSource.MNIST.value, _values(DigitSource)),
    "digit.data_dir": Key(str, ""),
    "digit.latent_dim": Key(int, 64, minimum=1),
    "digit.texture_seed": Key(int, 1234, minimum=0),
    "itsa.epsilon": Key(float, 0.5, minimum=0.0),
    "itsa.lambda": Key(float, 0.1, minimum=0.0),
    "itsa.grad_norm_floor": Key(float, 1e-12),
    "itsa.reduction": Key(str, Reduction.MEAN.value, _values(Reduction)),
    "itsa.scalarization": Key(str, Scalarization.SUM.value, _values(Scalarization)),
    "itsa.perturbed_task_branch": Key(bool, False),
    "ib.beta": Key(float, 1e-3, minimum=0.0),
    "rib.beta_fisher": Key(float, 1e-3, minimum=0.0),
    "rib.sigma": Key(float, 1.0),
    "rib.n_probes": Key(int, 1, minimum=1),
    "stereo.method": Key(str, StereoMethod.BASELINE.value, _values(StereoMethod)),
    "stereo.seed": Key(int, 0, minimum=0),
    "stereo.epochs": Key(int, 10, minimum=1),
    "stereo.batch_size": Key(int, 4, minimum=1),
    "stereo.lr": Key(float, 1e-3),
    "stereo.lr_decay_epoch": Key(int, 0, minimum=0),
    "stereo.train_size": Key(int, 2000, minimum=1),
    "stereo.test_size": Key(int, 50, minimum=1),
    "stereo.feature_channels": Key(int, 8, minimum=1),
    "stereo.stride": Key(int, 4, minimum=1),
    "stereo.eval_epsilon": Key(float, 0.5, minimum=0.0),
    "stereo.vis_samples": Key(int, 2, minimum=0),
    "scene.height": Key(int, 64, minimum=1),
    "scene.width": Key(int, 128, minimum=1),
    "scene.max_disparity": Key(int, 32, minimum=1),
    "scene.min_layers": Key(int, 3, minimum=0),
    "scene.max_layers": Key(int, 6, minimum=0),
    "scene.textures": Key(str, ",".join(_values(TextureKind))),
    "scene.seed": Key(int, 0, minimum=0),
    "eval.d1_threshold": Key(float, 3.0),
    "eval.shifts": Key(str, "acj,gray_left,gray_right,scp"),
    "fisher.seed": Key(int, 0, minimum=0),
    "fisher.n_samples": Key(int, 100000, minimum=1),
    "fisher.n_probes": Key(int, 10000, minimum=1),
    "fisher.sigma": Key(float, 1.0),
    "fisher.epsilons": Key(str, "0.1,0.03,0.01"),
    "gradcheck.h": Key(float, 1e-5),
    "gradcheck.tol": Key(float, 1e-4),
    "gradcheck.instances": Key(int, 20, minimum=1),
    "gradcheck.seed": Key(int, 0, minimum=0),
}

# float keys that must be strictly positive
POSITIVE_SUFFIXES = ("lr", "sigma", "floor", ".h", "tol", "threshold")

# comma-separated lists checked member by member
LIST_CHOICES: dict[str, tuple[str, ...]] = {
    "scene.textures": _values(TextureKind),
    "eval.shifts": _values(ShiftKind),
}


def _split_list(raw: str) -> list[str]:
    return [item.strip() for item in raw.split(",") if item.strip()]


def _coerce(key: str, value: Any, line: int | None) -> Any:
    spec = KEYS[key]
    if spec.kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true or false, got {value!r}", line)
    elif spec.kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} expects an integer, got {value!r}", line)
    elif spec.kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}", line)
        value = float(value)
    elif not isinstance(value, str):
        raise ConfigError(f"{key} expects a string, got {value!r}", line)

    if spec.choices is not None and value not in spec.choices:
        raise ConfigError(
            f"invalid value {value!r} for {key}. "
            f"Available values: {', '.join(spec.choices)}",
            line,
        )
    if key in LIST_CHOICES:
        bad = [item for item in _split_list(value) if item not in LIST_CHOICES[key]]
        if bad or not _split_list(value):
            raise ConfigError(
                f"invalid value {value!r} for {key}. "
                f"Available items: {', '.join(LIST_CHOICES[key])}",
                line,
            )
    if spec.minimum is not None and value < spec.minimum:
        raise ConfigError(f"{key} must be >= {spec.minimum}, got {value!r}", line)
    if spec.maximum is not None and value >= spec.maximum:
        raise ConfigError(f"{key} must be < {spec.maximum}, got {value!r}", line)
    if spec.kind is float and key.endswith(POSITIVE_SUFFIXES) and value <= 0:
        raise ConfigError(f"{key} must be > 0, got {value!r}", line)
    return value


def _parse_value(key: str, raw: str, line: int) -> Any:
    try:
        return tomlkit.parse(f"value = {raw}").unwrap()["value"]
    except (ParseError, ValueError) as e:
        bare = raw.split("#", 1)[0].strip()
        if KEYS[key].kind is str and bare and not any(c in bare for c in "\"'=[]{}"):
            return bare
        raise ConfigError(f"cannot parse value for {key}: {raw.strip()!r}", line) from e


@dataclass(frozen=True)
class ExperimentConfig:
    """Every key of the table, with defaults filled in."""

    values: Mapping[str, Any] = field(
        default_factory=lambda: {k: spec.default for k, spec in KEYS.items()}
    )

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def with_overrides(self, overrides: Mapping[str, Any]) -> "ExperimentConfig":
        """Copy with validated values replacing existing keys."""
        values = dict(self.values)
        for key, value in overrides.items():
            if key not in KEYS:
                raise ConfigError(f"unknown key {key!r}")
            values[key] = _coerce(key, value, None)
        return ExperimentConfig(values).validated()

    @property
    def run_id(self) -> str:
        return str(self["run.id"])

    def seeds(self, suite: Suite) -> list[int]:
        """Consecutive seeds starting at the suite's own seed."""
        base = int(self[f"{Suite(suite).value}.seed"])
        return [base + k for k in range(int(self["run.seeds"]))]

    def scp(self, epsilon_key: str = "itsa.epsilon") -> ScpConfig:
        return ScpConfig(
            epsilon=self[epsilon_key],
            grad_norm_floor=self["itsa.grad_norm_floor"],
            lam=self["itsa.lambda"],
            reduction=Reduction(self["itsa.reduction"]),
            scalarization=Scalarization(self["itsa.scalarization"]),
            perturbed_task_branch=self["itsa.perturbed_task_branch"],
        )

    def ib(self) -> IbConfig:
        return IbConfig(
            beta=self["ib.beta"],
            beta_fisher=self["rib.beta_fisher"],
            n_probes=self["rib.n_probes"],
            sigma=self["rib.sigma"],
        )

    def digit_run(self, seed: int) -> DigitRunConfig:
        return DigitRunConfig(
            method=Method(self["digit.method"]),
            seed=seed,
            epochs=self["digit.epochs"],
            batch_size=self["digit.batch_size"],
            lr=self["digit.lr"],
            scp=self.scp(),
            ib=self.ib(),
            train_size=self["digit.train_size"],
            val_fraction=self["digit.val_fraction"],
            latent_dim=self["digit.latent_dim"],
            run_id=self.run_id,
        )

    def scene(self) -> SceneConfig:
        return SceneConfig(
            height=self["scene.height"],
            width=self["scene.width"],
            max_disparity=self["scene.max_disparity"],
            min_layers=self["scene.min_layers"],
            max_layers=self["scene.max_layers"],
            textures=tuple(TextureKind(t) for t in _split_list(self["scene.textures"])),
            seed=self["scene.seed"],
        )

    def stereo_run(self, seed: int) -> StereoRunConfig:
        return StereoRunConfig(
            method=StereoMethod(self["stereo.method"]),
            seed=seed,
            epochs=self["stereo.epochs"],
            batch_size=self["stereo.batch_size"],
            lr=self["stereo.lr"],
            lr_decay_epoch=self["stereo.lr_decay_epoch"],
            train_size=self["stereo.train_size"],
            feature_channels=self["stereo.feature_channels"],
            stride=self["stereo.stride"],
            scene=self.scene(),
            scp=self.scp(),
            run_id=self.run_id,
        )

    def shifts(self) -> list[ShiftKind]:
        return [ShiftKind(s) for s in _split_list(self["eval.shifts"])]

    def validated(self) -> "ExperimentConfig":
        """Build every typed view once so rules spanning keys fail as ConfigError."""
        try:
            self.digit_run(self["digit.seed"])
            self.stereo_run(self["stereo.seed"])
            self.scp("stereo.eval_epsilon")
        except ValueError as e:
            raise ConfigError(str(e)) from e
        self.epsilons()
        return self

    def epsilons(self) -> list[float]:
        try:
            values = [float(v) for v in _split_list(self["fisher.epsilons"])]
        except ValueError as e:
            raise ConfigError(f"fisher.epsilons must be numbers: {e}") from e
        if not values or min(values) <= 0:
            raise ConfigError("fisher.epsilons must be positive numbers")
        return values


def parse_config(text: str) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Raises:
        ConfigError: With the 1-based line number, for a malformed line, an
            unknown key, a duplicate key, an unparsable value or a value of the
            wrong type or range.
    """
    values = {k: spec.default for k, spec in KEYS.items()}
    seen: dict[str, int] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value', got {stripped!r}", number)
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in KEYS:
            hint = difflib.get_close_matches(key, KEYS, n=1)
            suggestion = f"; did you mean {hint[0]!r}?" if hint else ""
            raise ConfigError(f"unknown key {key!r}{suggestion}", number)
        if key in seen:
            raise ConfigError(
                f"duplicate key {key!r} (first set on line {seen[key]})", number
            )
        seen[key] = number
        values[key] = _coerce(key, _parse_value(key, raw, number), number)
    return ExperimentConfig(values).validated()


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical text: every key, sorted, one TOML scalar per line."""
    return "".join(
        f"{key} = {tomlkit.item(cfg[key]).as_string()}\n" for key in sorted(KEYS)
    )


def load_config(path: Path | None) -> ExperimentConfig:
    """Parse a config file; no path means all defaults."""
    if path is None:
        return ExperimentConfig()
    logger.info(f"reading config {path}")
    return parse_config(Path(path).read_text(encoding="utf-8"))
