"""Tests for per-channel standardization."""

import numpy as np
import pytest

from itsa_lab.normalize import STD_FLOOR, Standardizer


class TestStandardizer:
    """Tests for Standardizer."""

    def test_fitted_channels_are_standardized(self):
        """Applying the fitted statistics gives zero mean and unit spread."""
        rng = np.random.default_rng(0)
        images = rng.random((8, 3, 5, 5)) * [[[0.2]], [[0.5]], [[1.0]]]
        out = Standardizer.fit(images).apply(images)
        assert out.dtype == np.float32
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.std(axis=(0, 2, 3)), 1.0, rtol=1e-4)

    def test_constant_channel_uses_floor(self):
        """A flat channel is not divided by zero."""
        std = Standardizer.fit(np.full((2, 1, 3, 3), 0.4))
        assert std.std[0] == pytest.approx(STD_FLOOR)
        assert np.isfinite(std.apply(np.zeros((1, 3, 3)))).all()

    def test_requires_batches(self):
        """Fitting needs an [n, c, h, w] batch."""
        with pytest.raises(ValueError, match="expected"):
            Standardizer.fit(np.zeros((3, 4, 4)))

    def test_identity(self):
        """The identity standardizer leaves images unchanged."""
        image = np.random.default_rng(1).random((3, 2, 2)).astype(np.float32)
        np.testing.assert_array_equal(Standardizer.identity(3).apply(image), image)

    def test_scale_maps_back_to_pixels(self):
        """A unit step in standardized space is std pixels."""
        std = Standardizer(
            mean=np.zeros(2, dtype=np.float32),
            std=np.array([0.5, 2.0], dtype=np.float32),
        )
        step = std.scale(np.ones((2, 1, 1)))
        np.testing.assert_allclose(step[:, 0, 0], [0.5, 2.0])
