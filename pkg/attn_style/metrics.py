"""Metrics module contains the content-fidelity and color-transfer measurements.

- CFSD: mean KL divergence between the row-softmaxed patch self-similarity maps of two images.
- RGB-uv histogram and histogram loss: intensity-weighted log-chroma histograms compared with the
  Hellinger distance.
- PSNR, used for DDIM round-trip checks.

Every metric takes images as 3×H×W arrays (or Tensors) of RGB values in [0, 1] and reduces in float64.
"""
import logging
import math
import warnings

import numpy as np

from attn_style.exc import DegenerateInputWarning, NormalizationError, ShapeError
from attn_style.tensor import Tensor


logger = logging.getLogger(__name__)

PATCH_SIZE = 8
HISTOGRAM_BINS = 64
HISTOGRAM_EPS = 1e-6
KERNEL_FALLOFF = 0.02
UV_RANGE = (-3.0, 3.0)
LUMA = np.array([0.299, 0.587, 0.114])


def _as_image(image):
    if isinstance(image, Tensor):
        image = image.numpy()
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError("Expected a 3×H×W RGB image, got shape %r" % (image.shape,))
    return image


class FeatureMap(object):
    """hw×c matrix of patch features, one row per extraction position (raster order)."""

    def __init__(self, features):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or not np.all(np.isfinite(features)):
            raise ShapeError("A feature map is a finite hw×c matrix")
        self.features = features

    @property
    def positions(self):
        return self.features.shape[0]


class CorrelationMap(object):
    """hw×hw matrix whose rows are probability distributions."""

    def __init__(self, rows):
        self.rows = np.asarray(rows, dtype=np.float64)


class RGBuvHistogram(object):
    """B×B×3 histogram over (u, v) log-chroma bins, one plane per primary channel, summing to 1."""

    def __init__(self, values):
        self.values = np.asarray(values, dtype=np.float64)

    @property
    def bins(self):
        return self.values.shape[0]


def extract_patch_features(image, patch_size=PATCH_SIZE):
    """Cut the luma channel into non-overlapping patch_size×patch_size patches and turn every patch into a
    mean-subtracted, L2-normalized row vector. A flat patch becomes the zero vector.

    :returns: FeatureMap with (H/p)·(W/p) rows of p² features
    """
    image = _as_image(image)
    _, height, width = image.shape
    if height % patch_size or width % patch_size:
        raise ShapeError(
            "Image %d×%d is not a whole number of %d-pixel patches" % (height, width, patch_size)
        )
    luma = np.tensordot(LUMA, image, axes=1)
    patches = luma.reshape(height // patch_size, patch_size, width // patch_size, patch_size)
    rows = patches.transpose(0, 2, 1, 3).reshape(-1, patch_size * patch_size)
    rows = rows - rows.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    rows = np.divide(rows, norms, out=np.zeros_like(rows), where=norms > 1e-12)
    return FeatureMap(rows)


def correlation_map(feature_map):
    """S = row-wise softmax of the patch similarity matrix M = F·Fᵀ."""
    features = feature_map.features
    similarity = features @ features.T
    shifted = similarity - similarity.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return CorrelationMap(exp / exp.sum(axis=1, keepdims=True))


def cfsd(content_image, stylized_image, patch_size=PATCH_SIZE):
    """Content Feature Structural Distance, (1/hw)·Σ_i KL(S^c_i ‖ S^cs_i).

    Not symmetric in its arguments; softmax rows are strictly positive so no flooring is applied.
    """
    content = correlation_map(extract_patch_features(content_image, patch_size)).rows
    stylized = correlation_map(extract_patch_features(stylized_image, patch_size)).rows
    if content.shape != stylized.shape:
        raise ShapeError("CFSD needs images of the same resolution")
    kl = np.sum(content * (np.log(content) - np.log(stylized)), axis=1)
    return max(float(np.mean(kl)), 0.0)


def _log_chroma(image, eps):
    red, green, blue = (image[c] + eps for c in range(3))
    log_r, log_g, log_b = np.log(red), np.log(green), np.log(blue)
    return [
        (log_r - log_g, log_r - log_b),
        (log_g - log_r, log_g - log_b),
        (log_b - log_r, log_b - log_g),
    ]


def _kernel(values, centers, falloff):
    return 1.0 / (1.0 + ((values[:, None] - centers[None, :]) / falloff) ** 2)


def rgb_uv_histogram(
    image, bins=HISTOGRAM_BINS, eps=HISTOGRAM_EPS, falloff=KERNEL_FALLOFF, uv_range=UV_RANGE
):
    """Intensity-weighted RGB-uv histogram.

    For each primary channel c the pixel is projected to (u, v) = (log(I_c/I_a), log(I_c/I_b)) over the other
    two channels, clipped to `uv_range`, and spread over the bin centres with the inverse-quadratic kernel
    k = 1/(1 + (Δ/falloff)²) in each axis, weighted by I_y = √(R² + G² + B²). The whole B×B×3 histogram is
    normalized to sum 1. An all-black image has no weight anywhere; its histogram is defined as uniform
    and a DegenerateInputWarning is emitted.

    :param image: 3×H×W RGB in [0, 1]
    :param bins: B, bins per axis
    """
    image = _as_image(image)
    pixels = image.reshape(3, -1)
    intensity = np.sqrt(np.sum(pixels**2, axis=0))
    centers = np.linspace(uv_range[0], uv_range[1], bins)
    histogram = np.zeros((bins, bins, 3), dtype=np.float64)
    for channel, (u, v) in enumerate(_log_chroma(pixels, eps)):
        u = np.clip(u, *uv_range)
        v = np.clip(v, *uv_range)
        weighted = _kernel(u, centers, falloff) * intensity[:, None]
        histogram[:, :, channel] = weighted.T @ _kernel(v, centers, falloff)
    total = histogram.sum()
    if total <= 0:
        warnings.warn(
            "Image has zero intensity everywhere; using a uniform histogram", DegenerateInputWarning
        )
        return RGBuvHistogram(np.full((bins, bins, 3), 1.0 / (bins * bins * 3)))
    return RGBuvHistogram(histogram / total)


def _histogram_values(histogram):
    if isinstance(histogram, RGBuvHistogram):
        values = histogram.values
    else:
        values = np.asarray(histogram, dtype=np.float64)
    if np.any(values < 0) or abs(values.sum() - 1.0) > 1e-6:
        raise NormalizationError("Histogram must be nonnegative and sum to 1 (sum=%r)" % float(values.sum()))
    return values


def histogram_loss(histogram_stylized, histogram_style):
    """Hellinger distance (1/√2)·‖H_cs^½ − H_s^½‖₂, in [0, 1]."""
    a = _histogram_values(histogram_stylized)
    b = _histogram_values(histogram_style)
    if a.shape != b.shape:
        raise ShapeError("Histograms of shapes %r and %r cannot be compared" % (a.shape, b.shape))
    distance = np.sqrt(np.sum((np.sqrt(a) - np.sqrt(b)) ** 2)) / math.sqrt(2.0)
    return min(float(distance), 1.0)


def image_histogram_loss(stylized_image, style_image, bins=HISTOGRAM_BINS):
    return histogram_loss(rgb_uv_histogram(stylized_image, bins), rgb_uv_histogram(style_image, bins))


def psnr(reference, estimate, data_range=1.0):
    """Peak signal-to-noise ratio in dB; infinite for identical inputs."""
    if isinstance(reference, Tensor):
        reference = reference.numpy()
    reference = np.asarray(reference, dtype=np.float64)
    if isinstance(estimate, Tensor):
        estimate = estimate.numpy()
    estimate = np.asarray(estimate, dtype=np.float64)
    if reference.shape != estimate.shape:
        raise ShapeError("PSNR needs equal shapes, got %r and %r" % (reference.shape, estimate.shape))
    mse = float(np.mean((reference - estimate) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)
