"""Reconstruction, novel-view and depth evaluation of a trained model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .latent import fit_distribution, fit_latents
from .losses import LossWeights
from .metrics import pearson, psnr

__all__ = [
    "FitSettings",
    "ImageScore",
    "eval_recon",
    "eval_novel_view",
    "eval_depth",
    "keypoint_depths",
    "fit_query_latents",
    "mean_score",
]


@dataclass(frozen=True)
class FitSettings:
    """Test-time latent fitting: fixed learning rate, network frozen."""

    steps: int = 1000
    lr: float = 1e-3
    pixels_per_step: int = 256
    lambda_mask: float = 1.0
    lambda_hard: float = 0.1
    seed: int = 0

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_mask, self.lambda_hard)


@dataclass
class ImageScore:
    name: str
    value: float


def _render(model, z, ex):
    color, depth, alpha = model.render_view(z, ex.extrinsics, ex.intrinsics)
    return color, depth, alpha


def eval_recon(model, examples, latents=None):
    """PSNR of every image rendered with its own latent (table row by default)."""
    scores = []
    for i, ex in enumerate(examples):
        z = model.latents.lookup(ex.index) if latents is None else latents[i]
        color, _, _ = _render(model, z, ex)
        scores.append(ImageScore(ex.name, psnr(color, ex.image)))
    return scores


def fit_query_latents(model, queries, settings: FitSettings, init=None):
    if init is None:
        init = fit_distribution(model.latents).mean
    return fit_latents(model, queries, init, settings.steps, settings.lr, settings.pixels_per_step,
                       settings.loss_weights, settings.seed)


def eval_novel_view(model, queries, targets, settings: FitSettings = FitSettings(), latents=None):
    """Fit a latent on each query view, render it at the paired target camera.

    ``queries[i]`` and ``targets[i]`` must show the same object.  Returns
    ``(scores, latents)``.
    """
    if len(queries) != len(targets):
        raise ValueError(f"{len(queries)} query views but {len(targets)} targets")
    if latents is None:
        latents = fit_query_latents(model, queries, settings)
    scores = []
    for z, tgt in zip(latents, targets):
        color, _, _ = _render(model, z, tgt)
        scores.append(ImageScore(tgt.name, psnr(color, tgt.image)))
    return scores, latents


def keypoint_depths(model, z, ex, alpha_min=0.5):
    """Composited depth and alpha at the example's valid landmark pixels.

    Returns ``(predicted, true, usable)`` where ``usable`` marks landmarks
    with alpha above ``alpha_min`` and ground-truth depth available.
    """
    lm = ex.landmarks
    depth, alpha = np.zeros(len(lm.points)), np.zeros(len(lm.points))
    idx = np.flatnonzero(lm.valid)
    if idx.size:
        _, d, a = model.render_view(z, ex.extrinsics, ex.intrinsics, uv=lm.points[idx])
        depth[idx], alpha[idx] = d, a
    true = ex.keypoint_depths if ex.keypoint_depths is not None else np.full(len(lm.points), np.nan)
    usable = lm.valid & (alpha > alpha_min) & np.isfinite(true)
    return depth, np.asarray(true, dtype=np.float64), usable


def eval_depth(model, examples, latents=None, alpha_min=0.5):
    """Per-image Pearson correlation of keypoint depths.

    Images with fewer than three usable keypoints or constant depths are
    reported with ``nan`` and left out of the mean by the caller.
    """
    if all(ex.keypoint_depths is None for ex in examples):
        raise ValueError("dataset has no keypoint depth ground truth")
    scores = []
    for i, ex in enumerate(examples):
        z = model.latents.lookup(ex.index) if latents is None else latents[i]
        pred, true, ok = keypoint_depths(model, z, ex, alpha_min)
        try:
            r = pearson(pred[ok], true[ok])
        except ValueError:
            r = float("nan")
        scores.append(ImageScore(ex.name, r))
    return scores


def mean_score(scores) -> float:
    vals = np.array([s.value for s in scores], dtype=np.float64)
    vals = vals[np.isfinite(vals)]
    if vals.size == 0:
        raise ValueError("no finite scores")
    return float(vals.mean())
