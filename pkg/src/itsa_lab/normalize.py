"""Per-channel input standardization fitted on source-domain data."""

from dataclasses import dataclass

import numpy as np

from .data.domains import FloatArray

STD_FLOOR = 1e-6


@dataclass(frozen=True)
class Standardizer:
    """Maps images in [0, 1] to zero-mean, unit-variance channels."""

    mean: FloatArray  # [channels]
    std: FloatArray  # [channels]

    @classmethod
    def fit(cls, images: FloatArray) -> "Standardizer":
        """Channel statistics of an [n, c, h, w] batch."""
        if images.ndim != 4:
            raise ValueError(f"expected [n, c, h, w] images, got {images.shape}")
        data = images.astype(np.float64)
        mean = data.mean(axis=(0, 2, 3))
        std = np.maximum(data.std(axis=(0, 2, 3)), STD_FLOOR)
        return cls(mean=mean.astype(np.float32), std=std.astype(np.float32))

    @classmethod
    def identity(cls, channels: int) -> "Standardizer":
        return cls(
            mean=np.zeros(channels, dtype=np.float32),
            std=np.ones(channels, dtype=np.float32),
        )

    def apply(self, images: FloatArray) -> FloatArray:
        """Standardize a [c, h, w] image or an [n, c, h, w] batch."""
        mean = self.mean.reshape(-1, 1, 1)
        std = self.std.reshape(-1, 1, 1)
        return ((images - mean) / std).astype(np.float32)

    def scale(self, direction: FloatArray) -> FloatArray:
        """Map a step in standardized units back to pixel units."""
        return direction * self.std.reshape(-1, 1, 1)
