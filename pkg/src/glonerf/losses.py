"""Photometric, mask and hard-surface losses with their gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "LossWeights",
    "LossBreakdown",
    "rgb_loss",
    "mask_loss",
    "hard_loss",
    "hard_loss_grad",
    "total_loss",
]


@dataclass(frozen=True)
class LossWeights:
    mask: float = 1.0
    hard: float = 0.1

    def __post_init__(self):
        for name in ("mask", "hard"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")


@dataclass
class LossBreakdown:
    rgb: float
    mask: float
    hard: float
    total: float


def rgb_loss(rendered, target) -> float:
    """Squared L2 distance summed over the colour channels."""
    diff = np.asarray(rendered, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float((diff * diff).sum())


def mask_loss(alpha, mask) -> float:
    return float((alpha - mask) ** 2)


def _hard_terms(w):
    # -log(exp(-|w|) + exp(-|1 - w|)), the normalising constant dropped
    return -np.logaddexp(-np.abs(w), -np.abs(1 - w))


def hard_loss(w) -> float:
    """Mean negative log of the two-Laplacian weight prior (modes at 0 and 1)."""
    w = np.asarray(w)
    return float(np.mean(_hard_terms(w)))


def hard_loss_grad(w):
    """Elementwise derivative of the per-sample hard-surface term."""
    w = np.asarray(w)
    a = -np.abs(w)
    b = -np.abs(1 - w)
    m = np.maximum(a, b)
    ea, eb = np.exp(a - m), np.exp(b - m)
    return (ea * np.sign(w) - eb * np.sign(1 - w)) / (ea + eb)


def total_loss(color, alpha, weights, target_rgb, target_mask=None, has_mask=None,
               loss_weights: LossWeights = LossWeights()):
    """Batch objective and its gradients.

    ``color`` ``(B, 3)``, ``alpha`` ``(B,)``, ``weights`` ``(B, N)``.  The rgb
    and mask terms are means over the B pixels (pixels without a mask add
    zero to the mask sum); the hard term is a mean over all B*N weights.

    Returns ``(LossBreakdown, d_color, d_alpha, d_weights)``.
    """
    color = np.asarray(color)
    b = color.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    diff = color - target_rgb
    l_rgb = (diff * diff).sum() / b
    d_color = (2.0 / b) * diff

    d_alpha = np.zeros_like(alpha)
    l_mask = 0.0
    if target_mask is not None:
        present = np.ones(b, dtype=bool) if has_mask is None else np.asarray(has_mask, dtype=bool)
        m_diff = np.where(present, alpha - target_mask, 0)
        l_mask = (m_diff * m_diff).sum() / b
        d_alpha = (2.0 * loss_weights.mask / b) * m_diff

    l_hard = _hard_terms(weights).mean()
    d_weights = None
    if loss_weights.hard > 0:
        d_weights = (loss_weights.hard / weights.size) * hard_loss_grad(weights)

    total = l_rgb + loss_weights.mask * l_mask + loss_weights.hard * l_hard
    breakdown = LossBreakdown(float(l_rgb), float(l_mask), float(l_hard), float(total))
    return breakdown, d_color, d_alpha.astype(color.dtype, copy=False), \
        (None if d_weights is None else d_weights.astype(color.dtype, copy=False))
