"""The full generative model: foreground field, background, latent table."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .camera import pixel_rays
from .field import BackgroundModel, FieldModel
from .latent import LatentTable
from .losses import LossWeights, total_loss
from .render import render_image, render_rays, render_rays_backward

__all__ = ["ModelConfig", "LatentNeRF", "RayBatch", "ray_bounds"]


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 32
    width: int = 64
    depth: int = 4
    num_bands: int = 6
    skip: int | None = None
    bg_width: int = 256
    bg_layers: int = 5
    bg_bands: int = 4
    n_samples: int = 64
    # rays are clipped to this ball around the origin; set near/far to override
    scene_radius: float = 1.0
    near: float | None = None
    far: float | None = None
    alpha_premultiply: bool = False

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def ray_bounds(origins, config: ModelConfig):
    """Per-ray ``(near, far)``: fixed if configured, else the camera's distance +- radius."""
    origins = np.asarray(origins)
    if config.near is not None and config.far is not None:
        n = np.full(origins.shape[0], config.near)
        return n, np.full(origins.shape[0], config.far)
    dist = np.linalg.norm(origins, axis=-1).astype(np.float64)
    near = np.maximum(dist - config.scene_radius, 1e-3)
    return near, dist + config.scene_radius


@dataclass
class RayBatch:
    rows: np.ndarray  # latent row per ray
    origins: np.ndarray
    directions: np.ndarray
    target: np.ndarray  # (R, 3)
    mask: np.ndarray  # (R,)
    has_mask: np.ndarray  # (R,) bool
    pixels: np.ndarray  # (R,) flat pixel index within its image
    images: np.ndarray  # (R,) index into the example list


class LatentNeRF:
    def __init__(self, config: ModelConfig, field: FieldModel, background: BackgroundModel,
                 latents: LatentTable):
        self.config = config
        self.field = field
        self.background = background
        self.latents = latents

    @classmethod
    def create(cls, config: ModelConfig, num_latents: int, seed: int = 0, dtype=np.float32):
        ss = np.random.SeedSequence(seed).spawn(2)
        fg = FieldModel.create(config.latent_dim, config.width, config.depth, config.num_bands,
                               config.skip, seed=ss[0], dtype=dtype)
        bg = BackgroundModel.create(config.latent_dim, config.bg_width, config.bg_layers,
                                    config.bg_bands, seed=ss[1], dtype=dtype)
        return cls(config, fg, bg, LatentTable(num_latents, config.latent_dim, dtype))

    @property
    def dtype(self):
        return self.field.mlp.dtype

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def parameters(self) -> list[np.ndarray]:
        return self.field.parameters() + self.background.parameters()

    def copy(self, dtype=None) -> LatentNeRF:
        dtype = dtype or self.dtype
        return LatentNeRF(self.config, self.field.copy(dtype), self.background.copy(dtype),
                          LatentTable.from_array(self.latents.data.astype(dtype)))

    def render(self, z, origins, directions, rng=None, n_samples=None):
        near, far = ray_bounds(origins, self.config)
        return render_rays(self.field, self.background, z, origins, directions, near, far,
                           n_samples or self.config.n_samples, rng, self.config.alpha_premultiply)

    def pixel_batch(self, examples, rows, pixels_per_image, rng) -> RayBatch:
        """Random pixels (with replacement) from each example, tagged with its latent row."""
        parts = []
        for i, (ex, row) in enumerate(zip(examples, rows)):
            origin, dirs = ex.rays()
            pix = rng.integers(0, dirs.shape[0], size=pixels_per_image)
            img = ex.image.reshape(-1, 3)
            if ex.mask is not None:
                m, hm = ex.mask.reshape(-1)[pix], np.ones(len(pix), bool)
            else:
                m, hm = np.zeros(len(pix)), np.zeros(len(pix), bool)
            parts.append((np.full(len(pix), row), np.broadcast_to(origin, (len(pix), 3)), dirs[pix],
                          img[pix], m, hm, pix, np.full(len(pix), i)))
        cols = [np.concatenate(c) for c in zip(*parts)]
        dt = self.dtype
        return RayBatch(cols[0].astype(np.int64), cols[1].astype(dt), cols[2].astype(dt),
                        cols[3].astype(dt), cols[4].astype(dt), cols[5], cols[6], cols[7])

    def loss_and_grads(self, z, batch: RayBatch, loss_weights: LossWeights, rng=None,
                       need_params=True, n_samples=None):
        """Forward and backward for one ray batch.

        ``z`` holds one latent per ray.  Returns ``(breakdown, field_grads,
        background_grads, dz_per_ray, render_output)``.
        """
        out, cache = self.render(z, batch.origins, batch.directions, rng, n_samples)
        breakdown, d_color, d_alpha, d_w = total_loss(out.color, out.alpha, out.weights, batch.target,
                                                      batch.mask, batch.has_mask, loss_weights)
        fg, bg, dz = render_rays_backward(self.field, self.background, out, cache, d_color, d_alpha,
                                          None, d_w, param_grads=need_params)
        return breakdown, fg, bg, dz, out

    def render_view(self, z, extrinsics, intrinsics, uv=None, chunk=4096):
        """Deterministic render through a camera.

        Returns colour ``(H, W, 3)``, depth and alpha ``(H, W)``; with ``uv``
        given, per-pixel arrays for those positions instead.
        """
        origin, dirs = pixel_rays(extrinsics, intrinsics, uv)
        origins = np.broadcast_to(origin, dirs.shape)
        near, far = ray_bounds(origins, self.config)
        color, depth, alpha = render_image(self.field, self.background, np.asarray(z, self.dtype),
                                           origins.astype(self.dtype), dirs.astype(self.dtype), near,
                                           far, self.config.n_samples, chunk,
                                           self.config.alpha_premultiply)
        if uv is None:
            shape = (intrinsics.height, intrinsics.width)
            return color.reshape(*shape, 3), depth.reshape(shape), alpha.reshape(shape)
        return color, depth, alpha
