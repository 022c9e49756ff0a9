"""Procedural color textures for scene layers and digit backgrounds."""

import numpy as np
from scipy import ndimage

from .data.constants import TextureKind
from .data.domains import FloatArray


def color_noise(
    rng: np.random.Generator, height: int, width: int, cells: int = 4
) -> FloatArray:
    """Low-frequency color noise: a coarse random grid, bilinearly upsampled.

    Returns:
        A [3, height, width] float32 array in [0, 1].
    """
    grid = rng.random((3, cells + 1, cells + 1))
    zoomed = ndimage.zoom(
        grid, (1, height / (cells + 1), width / (cells + 1)), order=1, grid_mode=True,
        mode="nearest",
    )
    return np.clip(zoomed[:, :height, :width], 0.0, 1.0).astype(np.float32)


def _random_color(rng: np.random.Generator) -> FloatArray:
    return rng.random(3).reshape(3, 1, 1)


def make_texture(
    kind: TextureKind, rng: np.random.Generator, height: int, width: int
) -> FloatArray:
    """Paint a [3, height, width] texture of the given kind."""
    if kind == TextureKind.FLAT:
        tex = np.broadcast_to(_random_color(rng), (3, height, width))
    elif kind == TextureKind.GRADIENT:
        angle = rng.uniform(0.0, 2.0 * np.pi)
        yy, xx = np.mgrid[0:height, 0:width]
        ramp = np.cos(angle) * xx + np.sin(angle) * yy
        ramp = (ramp - ramp.min()) / max(float(np.ptp(ramp)), 1.0)
        a, b = _random_color(rng), _random_color(rng)
        tex = a + (b - a) * ramp[None]
    elif kind == TextureKind.CHECKER:
        cell = int(rng.integers(2, 9))
        yy, xx = np.mgrid[0:height, 0:width]
        parity = ((yy // cell + xx // cell) % 2).astype(bool)
        tex = np.where(parity[None], _random_color(rng), _random_color(rng))
    elif kind == TextureKind.NOISE:
        tex = color_noise(rng, height, width, cells=int(rng.integers(3, 9)))
    else:
        raise ValueError(
            f"Unknown texture kind: {kind}. "
            f"Available kinds: {', '.join(k.value for k in TextureKind)}"
        )
    return np.ascontiguousarray(tex, dtype=np.float32)
