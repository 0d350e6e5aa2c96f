"""Image and depth evaluation metrics."""

from __future__ import annotations

import numpy as np

__all__ = ["PSNR_CAP", "psnr", "pearson", "depth_correlation"]

PSNR_CAP = 99.0


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio for images in [0, 1]; identical images give ``PSNR_CAP``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return float(10 * np.log10(1.0 / mse))


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError("inputs must have equal length")
    if x.size < 3:
        raise ValueError(f"need at least 3 points, got {x.size}")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(dx @ dx), np.sqrt(dy @ dy)
    if sx == 0 or sy == 0:
        raise ValueError("zero variance input")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


def depth_correlation(predicted, true) -> float:
    """Mean per-image Pearson correlation.

    Accepts one image's depths (1-D arrays) or a sequence of per-image arrays.
    """
    if len(predicted) and np.isscalar(predicted[0]):
        return pearson(predicted, true)
    if len(predicted) != len(true):
        raise ValueError("image count mismatch")
    if len(predicted) == 0:
        raise ValueError("no images")
    return float(np.mean([pearson(p, t) for p, t in zip(predicted, true)]))
