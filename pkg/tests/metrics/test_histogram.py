import math

import numpy as np
from pytest import raises, warns

from attn_style import (
    DegenerateInputWarning,
    NormalizationError,
    ShapeError,
    histogram_loss,
    rgb_uv_histogram,
)
from attn_style.metrics import RGBuvHistogram, image_histogram_loss


def solid(red, green, blue, size=8):
    return np.stack([np.full((size, size), value) for value in (red, green, blue)])


def histogram_oracle(image, bins=64, eps=1e-6, falloff=0.02, low=-3.0, high=3.0):
    """Per-pixel float64 binning."""
    centers = [low + (high - low) * i / (bins - 1) for i in range(bins)]
    histogram = np.zeros((bins, bins, 3))
    _, height, width = image.shape
    for y in range(height):
        for x in range(width):
            rgb = [float(image[c, y, x]) for c in range(3)]
            weight = math.sqrt(sum(value * value for value in rgb))
            for c in range(3):
                a, b = [i for i in range(3) if i != c]
                u = min(max(math.log((rgb[c] + eps) / (rgb[a] + eps)), low), high)
                v = min(max(math.log((rgb[c] + eps) / (rgb[b] + eps)), low), high)
                k_u = np.array([1.0 / (1.0 + ((u - center) / falloff) ** 2) for center in centers])
                k_v = np.array([1.0 / (1.0 + ((v - center) / falloff) ** 2) for center in centers])
                histogram[:, :, c] += weight * np.outer(k_u, k_v)
    return histogram / histogram.sum()


class TestRGBuvHistogram(object):
    def setup_method(self, method):
        self.rng = np.random.default_rng(41)

    def test_normalized(self):
        histogram = rgb_uv_histogram(self.rng.uniform(size=(3, 16, 16)))
        assert isinstance(histogram, RGBuvHistogram)
        assert histogram.values.shape == (64, 64, 3)
        assert histogram.bins == 64
        assert np.all(histogram.values >= 0)
        assert np.isclose(histogram.values.sum(), 1.0)

    def test_gray_image_peaks_at_the_center(self):
        histogram = rgb_uv_histogram(solid(0.5, 0.5, 0.5)).values
        for channel in range(3):
            plane = histogram[:, :, channel]
            assert plane[31:33, 31:33].sum() > 0.5 * plane.sum()
            assert np.isclose(plane.sum(), 1.0 / 3.0)

    def test_pure_color_lands_in_a_corner(self):
        histogram = rgb_uv_histogram(solid(1.0, 0.0, 0.0)).values
        red = histogram[:, :, 0]
        assert np.unravel_index(red.argmax(), red.shape) == (63, 63)

    def test_matches_per_pixel_binning(self):
        image = self.rng.uniform(size=(3, 16, 16))
        total_variation = 0.5 * np.abs(rgb_uv_histogram(image).values - histogram_oracle(image)).sum()
        assert total_variation < 1e-6

    def test_invariant_to_pixel_shuffle(self):
        image = self.rng.uniform(size=(3, 16, 16))
        order = self.rng.permutation(16 * 16)
        shuffled = image.reshape(3, -1)[:, order].reshape(3, 16, 16)
        expected = rgb_uv_histogram(image).values
        assert np.allclose(rgb_uv_histogram(shuffled).values, expected, rtol=0, atol=1e-12)

    def test_custom_bins(self):
        assert rgb_uv_histogram(self.rng.uniform(size=(3, 8, 8)), bins=16).values.shape == (16, 16, 3)

    def test_black_image_is_uniform(self):
        with warns(DegenerateInputWarning):
            histogram = rgb_uv_histogram(np.zeros((3, 8, 8))).values
        assert np.allclose(histogram, 1.0 / (64 * 64 * 3))

    def test_intensity_weighting(self):
        image = solid(0.5, 0.5, 0.5)
        image[:, :, :4] = solid(0.9, 0.1, 0.1, size=8)[:, :, :4]
        dim = image.copy()
        dim[:, :, :4] *= 0.1
        red_mass = rgb_uv_histogram(image).values[40:, 40:, 0].sum()
        dim_red_mass = rgb_uv_histogram(dim).values[40:, 40:, 0].sum()
        assert red_mass > dim_red_mass


class TestHistogramLoss(object):
    def setup_method(self, method):
        self.rng = np.random.default_rng(42)

    def test_identical(self):
        histogram = rgb_uv_histogram(self.rng.uniform(size=(3, 8, 8)))
        assert histogram_loss(histogram, histogram) == 0.0

    def test_symmetric_and_bounded(self):
        a = rgb_uv_histogram(self.rng.uniform(size=(3, 8, 8)))
        b = rgb_uv_histogram(self.rng.uniform(size=(3, 8, 8)) ** 3)
        loss = histogram_loss(a, b)
        assert 0.0 < loss <= 1.0
        assert np.isclose(loss, histogram_loss(b, a))

    def test_disjoint_supports(self):
        a = np.zeros((4, 4, 3))
        b = np.zeros((4, 4, 3))
        a[0, 0, 0] = 1.0
        b[3, 3, 2] = 1.0
        assert histogram_loss(a, b) == 1.0

    def test_disjoint_colors(self):
        assert image_histogram_loss(solid(1.0, 0.0, 0.0), solid(0.0, 1.0, 0.0)) > 0.5

    def test_closer_palette_scores_lower(self):
        style = solid(0.8, 0.3, 0.2)
        near = solid(0.75, 0.3, 0.25)
        far = solid(0.2, 0.3, 0.8)
        assert image_histogram_loss(near, style) < image_histogram_loss(far, style)

    def test_accepts_arrays(self):
        uniform = np.full((4, 4, 3), 1.0 / 48)
        assert histogram_loss(uniform, uniform) == 0.0

    def test_rejects_unnormalized(self):
        with raises(NormalizationError):
            histogram_loss(np.ones((4, 4, 3)), np.full((4, 4, 3), 1.0 / 48))

    def test_rejects_negative(self):
        values = np.full((4, 4, 3), 1.0 / 48)
        values[0, 0, 0] = -values[0, 0, 0]
        values[0, 0, 1] += 2.0 / 48
        with raises(NormalizationError):
            histogram_loss(values, np.full((4, 4, 3), 1.0 / 48))

    def test_shape_mismatch(self):
        image = self.rng.uniform(size=(3, 8, 8))
        with raises(ShapeError):
            histogram_loss(rgb_uv_histogram(image, bins=32), rgb_uv_histogram(image))
