"""Shared data structures for the laboratory."""

import hashlib
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import numpy.typing as npt

from .constants import (
    NUM_CLASSES,
    Method,
    Reduction,
    Scalarization,
    StereoMethod,
    TextureKind,
)

FloatArray = npt.NDArray[np.floating[Any]]
IntArray = npt.NDArray[np.integer[Any]]
BoolArray = npt.NDArray[np.bool_]


@dataclass(frozen=True)
class ScpConfig:
    """Shortcut-perturbation and Fisher-loss settings."""

    epsilon: float = 0.5
    grad_norm_floor: float = 1e-12
    lam: float = 0.1
    reduction: Reduction = Reduction.MEAN
    scalarization: Scalarization = Scalarization.SUM
    perturbed_task_branch: bool = False

    def __post_init__(self) -> None:
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.grad_norm_floor <= 0:
            raise ValueError(
                f"grad_norm_floor must be > 0, got {self.grad_norm_floor}"
            )


@dataclass
class PerturbedPair:
    """Clean and shortcut-perturbed inputs with their features."""

    x: FloatArray
    x_star: FloatArray
    u: FloatArray  # unit direction per sample, zero where degenerate
    z: FloatArray
    z_star: FloatArray
    degenerate: BoolArray


@dataclass(frozen=True)
class IbConfig:
    """Information-bottleneck baselines (variational IB and robust IB)."""

    beta: float = 1e-3
    beta_fisher: float = 1e-3
    n_probes: int = 1
    sigma: float = 1.0  # fixed encoder noise of the robust-IB bottleneck

    def __post_init__(self) -> None:
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.beta_fisher < 0:
            raise ValueError(f"beta_fisher must be >= 0, got {self.beta_fisher}")
        if self.n_probes < 1:
            raise ValueError(f"n_probes must be >= 1, got {self.n_probes}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")


@dataclass(frozen=True)
class FisherEstimate:
    """Monte-Carlo estimate with its standard error."""

    mean: float
    stderr: float
    n_samples: int


@dataclass(frozen=True)
class Lemma1Report:
    """Both sides of the first-order Fisher-information identity at one epsilon.

    ``rhs`` and ``relative_residual`` are None when the perturbation direction is
    (nearly) orthogonal to the density gradient.
    """

    epsilon: float
    psi: float
    lhs: float
    rhs: float | None
    tv_distance: float
    variance_term: float
    variance_term_mc: float
    relative_residual: float | None
    ill_conditioned: bool = False


@dataclass
class GradCheckReport:
    """Analytic-vs-finite-difference comparison for one model."""

    input_max_rel_err: float
    param_max_rel_err: dict[str, float]
    tol: float

    @property
    def max_rel_err(self) -> float:
        """Worst relative error over inputs and all parameters."""
        return max([self.input_max_rel_err, *self.param_max_rel_err.values()])

    @property
    def passed(self) -> bool:
        """True when every compared gradient is within tolerance."""
        return self.max_rel_err < self.tol


@dataclass
class LabeledImageSet:
    """Images in [0, 1] with integer digit labels."""

    images: FloatArray  # [n, channels, height, width]
    labels: IntArray
    split: str

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise ValueError(
                f"images must be [n, channels, height, width], got {self.images.shape}"
            )
        if len(self.labels) != len(self.images):
            raise ValueError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and (
            self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES
        ):
            raise ValueError(f"labels must lie in [0, {NUM_CLASSES - 1}]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def fingerprint(self) -> str:
        """Content hash identifying this set in data-access logs."""
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(self.images).tobytes())
        digest.update(np.ascontiguousarray(self.labels).tobytes())
        return digest.hexdigest()[:16]

    def subset(
        self, indices: IntArray | slice, split: str | None = None
    ) -> "LabeledImageSet":
        """Select samples, optionally re-tagging the split."""
        return LabeledImageSet(
            images=self.images[indices],
            labels=self.labels[indices],
            split=split or self.split,
        )


@dataclass(frozen=True)
class DigitRunConfig:
    """One digit-benchmark training run."""

    method: Method = Method.ERM
    seed: int = 0
    epochs: int = 3
    batch_size: int = 64
    lr: float = 1e-3
    scp: ScpConfig = field(default_factory=ScpConfig)
    ib: IbConfig = field(default_factory=IbConfig)
    train_size: int = 10000
    val_fraction: float = 0.1
    latent_dim: int = 64
    run_id: str = "itsa"

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in [0, 1), got {self.val_fraction}")


@dataclass(frozen=True)
class SceneConfig:
    """Procedural stereo scene parameters."""

    height: int = 64
    width: int = 128
    max_disparity: int = 32
    min_layers: int = 3
    max_layers: int = 6
    textures: tuple[TextureKind, ...] = tuple(TextureKind)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_disparity >= self.width / 2:
            raise ValueError(
                f"max_disparity ({self.max_disparity}) must be < width/2 "
                f"({self.width / 2})"
            )
        if not 0 <= self.min_layers <= self.max_layers:
            raise ValueError("need 0 <= min_layers <= max_layers")
        if not self.textures:
            raise ValueError("at least one texture kind is required")


@dataclass
class SceneLayer:
    """A fronto-parallel textured rectangle at constant integer disparity.

    ``texture`` is painted in object coordinates, so column j of the texture is
    object column j in both views.
    """

    top: int
    left: int
    height: int
    width: int
    disparity: int
    texture: FloatArray  # [3, height, width]


@dataclass
class StereoSample:
    """Rectified stereo pair with dense ground truth."""

    left: FloatArray  # [3, H, W]
    right: FloatArray  # [3, H, W]
    disparity: FloatArray  # [H, W], pixels
    valid_mask: BoolArray  # [H, W]
    occluded: BoolArray  # [H, W], not visible (or out of view) in the right image

    def replace_views(self, left: FloatArray, right: FloatArray) -> "StereoSample":
        """Copy with new images; ground truth is unchanged."""
        return StereoSample(
            left=left,
            right=right,
            disparity=self.disparity,
            valid_mask=self.valid_mask,
            occluded=self.occluded,
        )


@dataclass(frozen=True)
class StereoRunConfig:
    """One stereo training run."""

    method: StereoMethod = StereoMethod.BASELINE
    seed: int = 0
    epochs: int = 10
    batch_size: int = 4
    lr: float = 1e-3
    lr_decay_epoch: int = 0  # 0 halves the rate after half the epochs
    train_size: int = 2000
    feature_channels: int = 8
    stride: int = 4
    scene: SceneConfig = field(default_factory=SceneConfig)
    scp: ScpConfig = field(default_factory=ScpConfig)
    run_id: str = "itsa"

    def __post_init__(self) -> None:
        if self.stride & (self.stride - 1):
            raise ValueError(
                f"feature stride must be a power of two, got {self.stride}"
            )
        if self.scene.max_disparity % self.stride:
            raise ValueError(
                f"max_disparity ({self.scene.max_disparity}) must be a multiple "
                f"of the feature stride ({self.stride})"
            )
        if self.scene.height % self.stride or self.scene.width % self.stride:
            raise ValueError("image size must be divisible by the feature stride")


@dataclass(frozen=True)
class MetricsRecord:
    """One observation in the shared metrics schema."""

    run_id: str
    method: str
    seed: int
    epoch: int
    split: str
    metric: str
    value: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.value):
            raise ValueError(
                f"metric {self.metric} ({self.split}, epoch {self.epoch}) "
                f"is not finite: {self.value}"
            )
