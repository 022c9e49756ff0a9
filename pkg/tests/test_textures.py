"""Tests for the procedural textures."""

import numpy as np
import pytest

from itsa_lab.data.constants import TextureKind
from itsa_lab.textures import color_noise, make_texture


@pytest.mark.parametrize("kind", list(TextureKind))
def test_textures_fill_the_canvas(kind):
    """Every kind paints a contiguous [3, h, w] float32 image in [0, 1]."""
    tex = make_texture(kind, np.random.default_rng(0), 12, 20)
    assert tex.shape == (3, 12, 20)
    assert tex.dtype == np.float32
    assert tex.flags.c_contiguous
    assert tex.min() >= 0.0
    assert tex.max() <= 1.0


@pytest.mark.parametrize("kind", list(TextureKind))
def test_textures_are_seeded(kind):
    """The same generator state paints the same texture."""
    first = make_texture(kind, np.random.default_rng(5), 8, 8)
    second = make_texture(kind, np.random.default_rng(5), 8, 8)
    np.testing.assert_array_equal(first, second)


def test_flat_texture_is_constant():
    """A flat layer has one color per channel."""
    tex = make_texture(TextureKind.FLAT, np.random.default_rng(2), 4, 6)
    assert np.ptp(tex, axis=(1, 2)).max() == 0.0


def test_color_noise_varies_smoothly():
    """Neighbouring noise pixels differ less than the full range."""
    noise = color_noise(np.random.default_rng(3), 32, 32, cells=4)
    assert noise.shape == (3, 32, 32)
    assert np.abs(np.diff(noise, axis=2)).max() < 0.5


def test_unknown_kind():
    """Only the known texture kinds can be painted."""
    with pytest.raises(ValueError, match="Available kinds"):
        make_texture("marble", np.random.default_rng(0), 4, 4)
