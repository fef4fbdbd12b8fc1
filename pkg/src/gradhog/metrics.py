"""Reconstruction quality metrics: cross-correlation, mutual information, SSIM.

All functions take grayscale images as 2D arrays (or Image objects) with
intensities in [0, 1] and are pure. Cross-correlation is reported both as
Pearson correlation (the headline number) and as a raw normalized inner
product, since either reading of "cross-correlation" appears in practice.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

__all__ = [
    "MetricReport",
    "cross_correlation",
    "cross_correlation_raw",
    "mutual_information",
    "ssim",
    "compare_images",
]

_DEGENERATE_STD = 1e-12

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_RANGE = 1.0


def _as_gray_array(x, name):
    data = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if data.ndim != 2:
        raise ValueError(f"{name}: expected a grayscale image, got shape {data.shape}")
    return data


def _pair(a, b):
    a = _as_gray_array(a, "a")
    b = _as_gray_array(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


@dataclass(frozen=True)
class MetricReport:
    """The three comparison scores for one image pair."""

    cross_correlation: float
    cross_correlation_raw: float
    mutual_information: float
    ssim: float

    def __post_init__(self):
        for name, lo, hi in (
            ("cross_correlation", -1.0, 1.0),
            ("cross_correlation_raw", -1.0, 1.0),
            ("mutual_information", 0.0, np.inf),
            ("ssim", -1.0, 1.0),
        ):
            v = getattr(self, name)
            if not np.isfinite(v) and not (name == "mutual_information" and v == 0.0):
                raise ValueError(f"{name} is not finite: {v}")
            if v < lo - 1e-9 or v > hi + 1e-9:
                raise ValueError(f"{name}={v} outside [{lo}, {hi}]")


def cross_correlation(a, b) -> float:
    """Pearson correlation of pixel intensities.

    Degenerate variances (std below 1e-12) compare as equal when both
    images are constant and as uncorrelated when only one is.
    """
    a, b = _pair(a, b)
    am = a - a.mean()
    bm = b - b.mean()
    va = float(np.mean(am * am))
    vb = float(np.mean(bm * bm))
    if va < _DEGENERATE_STD**2 or vb < _DEGENERATE_STD**2:
        return 1.0 if (va < _DEGENERATE_STD**2 and vb < _DEGENERATE_STD**2) else 0.0
    # single sqrt of the product: correctly rounded sqrt(fl(x*x)) == x, so
    # self-comparison comes out exactly 1
    return float(np.clip(np.mean(am * bm) / np.sqrt(va * vb), -1.0, 1.0))


def cross_correlation_raw(a, b) -> float:
    """Normalized inner product without mean removal (cosine similarity)."""
    a, b = _pair(a, b)
    qa = float(np.vdot(a, a))
    qb = float(np.vdot(b, b))
    if qa < _DEGENERATE_STD**2 or qb < _DEGENERATE_STD**2:
        return 1.0 if (qa < _DEGENERATE_STD**2 and qb < _DEGENERATE_STD**2) else 0.0
    return float(np.clip(np.vdot(a, b) / np.sqrt(qa * qb), -1.0, 1.0))


def mutual_information(a, b, bins: int = 32) -> float:
    """MI in bits of the joint intensity histogram over [0, 1] x [0, 1].

    Uniform bins; empty cells contribute nothing. Self-comparison equals
    the marginal histogram entropy.
    """
    a, b = _pair(a, b)
    if bins < 2:
        raise ValueError(f"need at least 2 histogram bins, got {bins}")
    joint, _, _ = np.histogram2d(a.ravel(), b.ravel(), bins=bins, range=[[0.0, 1.0], [0.0, 1.0]])
    n = joint.sum()
    if n == 0:
        return 0.0
    p = joint / n
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    mask = p > 0.0
    mi = float(np.sum(p[mask] * np.log2(p[mask] / (px * py)[mask])))
    return max(mi, 0.0)


def _ssim_window() -> np.ndarray:
    radius = SSIM_WINDOW // 2
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b) -> float:
    """Mean local structural similarity with a Gaussian-weighted window.

    11x11 window, sigma 1.5, K1=0.01, K2=0.03, dynamic range 1; local
    statistics use the weighted moments directly (no sample-size
    correction) and only fully interior windows enter the mean.
    """
    a, b = _pair(a, b)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"image extents {a.shape} smaller than the {SSIM_WINDOW}-pixel window")
    w = _ssim_window()

    def smooth(x):
        return signal.correlate(x, w, mode="valid")

    mu_a = smooth(a)
    mu_b = smooth(b)
    var_a = smooth(a * a) - mu_a * mu_a
    var_b = smooth(b * b) - mu_b * mu_b
    cov = smooth(a * b) - mu_a * mu_b

    c1 = (SSIM_K1 * SSIM_RANGE) ** 2
    c2 = (SSIM_K2 * SSIM_RANGE) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def compare_images(a, b, mi_bins: int = 32) -> MetricReport:
    """All metrics for one pair, as reported per reconstruction."""
    return MetricReport(
        cross_correlation=cross_correlation(a, b),
        cross_correlation_raw=cross_correlation_raw(a, b),
        mutual_information=mutual_information(a, b, bins=mi_bins),
        ssim=ssim(a, b),
    )
