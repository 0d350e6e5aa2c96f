"""Stratified ray sampling and differentiable alpha compositing.

Everything here works on batches of rays: arrays shaped ``(R, N)`` hold one
value per sample, ``(R,)`` one value per ray.  The single-ray helpers
(:func:`render_pixel` and friends) are thin wrappers over the batched code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import BackgroundModel, FieldModel

__all__ = [
    "Ray",
    "RaySampleSet",
    "RenderOutput",
    "stratified_sample",
    "sample_ray",
    "render_weights",
    "weights_backward",
    "composite_color",
    "composite_depth",
    "composite_alpha",
    "composite_with_background",
    "render_pixel",
    "render_rays",
    "render_rays_backward",
    "render_image",
]


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValueError(f"ray direction must be unit length, |d| = {np.linalg.norm(d)}")
        if not 0 < self.t_near < self.t_far:
            raise ValueError(f"need 0 < t_near < t_far, got [{self.t_near}, {self.t_far}]")


@dataclass
class RaySampleSet:
    positions: np.ndarray  # (N, 3)
    t: np.ndarray
    delta: np.ndarray
    sigma: np.ndarray
    rgb: np.ndarray  # (N, 3)
    weights: np.ndarray


def stratified_sample(t_near, t_far, n: int, rng=None, dtype=np.float64):
    """One sample per equal-width bin of ``[t_near, t_far]``.

    With ``rng=None`` samples sit at bin midpoints; otherwise each is drawn
    uniformly inside its bin.  ``delta[i] = t[i+1] - t[i]`` and the last
    spacing runs to ``t_far``.  Bounds may be scalars or ``(R,)`` arrays.
    Returns ``(t, delta)``.
    """
    if n < 2:
        raise ValueError(f"need at least 2 samples per ray, got {n}")
    near = np.asarray(t_near, dtype=dtype)[..., None]
    far = np.asarray(t_far, dtype=dtype)[..., None]
    width = (far - near) / n
    if rng is None:
        u = np.full(np.broadcast_shapes(near.shape[:-1], far.shape[:-1]) + (n,), 0.5, dtype=dtype)
    else:
        u = rng.random(np.broadcast_shapes(near.shape[:-1], far.shape[:-1]) + (n,)).astype(dtype)
    t = near + (np.arange(n, dtype=dtype) + u) * width
    delta = np.concatenate([np.diff(t, axis=-1), far - t[..., -1:]], axis=-1)
    return t, delta


def sample_ray(ray: Ray, n: int, rng=None):
    """:func:`stratified_sample` over a single :class:`Ray`'s bounds."""
    return stratified_sample(ray.t_near, ray.t_far, n, rng)


def _transmittance_terms(sigma, delta):
    tau = sigma * delta
    acc = np.cumsum(tau, axis=-1)
    return tau, acc


def render_weights(sigma, delta) -> np.ndarray:
    """Per-sample contribution: local opacity times transmittance to the sample.

    Accumulated optical depth is summed in the log domain, so long opaque rays
    underflow gracefully to zero weight instead of producing NaNs.
    """
    sigma = np.asarray(sigma)
    delta = np.asarray(delta)
    if sigma.shape != delta.shape:
        raise ValueError(f"sigma {sigma.shape} and delta {delta.shape} must match")
    if np.any(sigma < 0) or np.any(delta < 0):
        raise ValueError("densities and spacings must be non-negative")
    tau, acc = _transmittance_terms(sigma, delta)
    return np.exp(-(acc - tau)) * -np.expm1(-tau)


def weights_backward(sigma, delta, weights, grad_w):
    """Gradient of ``sum(grad_w * w)`` with respect to the densities.

    Uses ``dL/dtau_k = g_k T_{k+1} - sum_{i>k} g_i w_i`` where ``T_{k+1}`` is
    the transmittance just past sample k.
    """
    _, acc = _transmittance_terms(sigma, delta)
    t_next = np.exp(-acc)
    gw = grad_w * weights
    after = np.cumsum(gw[..., ::-1], axis=-1)[..., ::-1] - gw
    return (grad_w * t_next - after) * delta


def composite_color(w, c) -> np.ndarray:
    w, c = np.asarray(w), np.asarray(c)
    if c.shape[:-1] != w.shape:
        raise ValueError(f"length mismatch: weights {w.shape} vs colours {c.shape}")
    return np.einsum("...n,...nc->...c", w, c)


def composite_depth(w, t):
    w, t = np.asarray(w), np.asarray(t)
    if w.shape != t.shape:
        raise ValueError(f"length mismatch: weights {w.shape} vs depths {t.shape}")
    return (w * t).sum(axis=-1)


def composite_alpha(w):
    return np.asarray(w).sum(axis=-1)


def composite_with_background(alpha, c_fg, c_bg, tol=1e-6):
    """Blend ``alpha * c_fg + (1 - alpha) * c_bg``.

    ``c_fg`` is the foreground colour *normalised* by its opacity.  The
    renderer's default path adds the raw weighted sum instead, which is the
    same thing without the division.
    """
    alpha = np.asarray(alpha)
    if np.any(alpha < -tol) or np.any(alpha > 1 + tol):
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    alpha = np.clip(alpha, 0, 1)[..., None] if alpha.ndim else np.clip(alpha, 0, 1)
    return alpha * np.asarray(c_fg) + (1 - alpha) * np.asarray(c_bg)


@dataclass
class RenderOutput:
    color: np.ndarray  # (R, 3)
    depth: np.ndarray  # (R,)
    alpha: np.ndarray  # (R,)
    weights: np.ndarray  # (R, N)
    t: np.ndarray
    delta: np.ndarray
    sigma: np.ndarray
    rgb: np.ndarray  # (R, N, 3)
    background: np.ndarray  # (R, 3)
    foreground: np.ndarray  # (R, 3), raw weighted sum


def render_rays(field: FieldModel, background: BackgroundModel | None, z, origins, directions,
                near, far, n_samples: int, rng=None, alpha_premultiply=False, background_color=None):
    """Render a batch of rays; returns ``(RenderOutput, cache)``.

    ``background=None`` composites over ``background_color`` (default black)
    instead of the learned background model.
    """
    dtype = field.mlp.dtype
    z = np.asarray(z, dtype=dtype)
    origins = np.asarray(origins, dtype=dtype)
    directions = np.asarray(directions, dtype=dtype)
    t, delta = stratified_sample(near, far, n_samples, rng, dtype=dtype)
    t = np.broadcast_to(t, (origins.shape[0], n_samples))
    delta = np.broadcast_to(delta, t.shape)
    x = origins[:, None, :] + t[..., None] * directions[:, None, :]
    sigma, rgb, field_cache = field.forward(z, x)
    w = render_weights(sigma, delta)
    fg = composite_color(w, rgb)
    alpha = composite_alpha(w)
    depth = composite_depth(w, t)
    if background is not None:
        bg, bg_cache = background.forward(z, directions)
    else:
        bg = np.broadcast_to(np.asarray(background_color if background_color is not None else 0.0,
                                        dtype=dtype), fg.shape)
        bg_cache = None
    scale = alpha[:, None] if alpha_premultiply else 1
    color = scale * fg + (1 - alpha[:, None]) * bg
    out = RenderOutput(color, depth, alpha, w, t, delta, sigma, rgb, bg, fg)
    return out, (field_cache, bg_cache, alpha_premultiply)


def render_rays_backward(field, background, out: RenderOutput, cache, d_color=None, d_alpha=None,
                         d_depth=None, d_weights=None, param_grads=True):
    """Backpropagate through :func:`render_rays`.

    Returns ``(field_grads, background_grads, dz)``; ``background_grads`` is
    None when no background model was used.
    """
    field_cache, bg_cache, premult = cache
    r = out.color.shape[0]
    dtype = out.weights.dtype
    d_color = np.zeros((r, 3), dtype) if d_color is None else d_color
    d_alpha = np.zeros(r, dtype) if d_alpha is None else d_alpha
    g_w = np.zeros_like(out.weights) if d_weights is None else d_weights.copy()

    d_alpha_total = d_alpha - (d_color * out.background).sum(-1)
    if premult:
        d_alpha_total = d_alpha_total + (d_color * out.foreground).sum(-1)
        d_fg = d_color * out.alpha[:, None]
    else:
        d_fg = d_color
    g_w += np.einsum("rc,rnc->rn", d_fg, out.rgb) + d_alpha_total[:, None]
    if d_depth is not None:
        g_w += d_depth[:, None] * out.t
    d_rgb = d_fg[:, None, :] * out.weights[..., None]
    d_sigma = weights_backward(out.sigma, out.delta, out.weights, g_w)
    field_grads, dz, _ = field.backward(field_cache, d_sigma, d_rgb, param_grads=param_grads)
    bg_grads = None
    if bg_cache is not None:
        d_bg = d_color * (1 - out.alpha[:, None])
        bg_grads, dz_bg, _ = background.backward(bg_cache, d_bg, param_grads=param_grads)
        dz = dz + dz_bg
    return field_grads, bg_grads, dz


def render_pixel(field, background, z, ray: Ray, n_samples: int, rng=None, alpha_premultiply=False):
    """Render one ray.  Returns ``(color, depth, alpha, RaySampleSet)``."""
    z = np.asarray(z)
    out, _ = render_rays(field, background, z[None], np.asarray(ray.origin)[None],
                         np.asarray(ray.direction)[None], ray.t_near, ray.t_far, n_samples, rng,
                         alpha_premultiply)
    positions = np.asarray(ray.origin) + out.t[0][:, None] * np.asarray(ray.direction)
    samples = RaySampleSet(positions, out.t[0], out.delta[0], out.sigma[0], out.rgb[0], out.weights[0])
    return out.color[0], float(out.depth[0]), float(out.alpha[0]), samples


def render_image(field, background, z, origins, directions, near, far, n_samples, chunk=4096,
                 alpha_premultiply=False):
    """Deterministic (midpoint-sampled) render of many rays sharing one latent.

    ``origins``/``directions`` are ``(..., 3)``; returns colour ``(..., 3)``,
    depth ``(...)`` and alpha ``(...)``.
    """
    shape = np.shape(directions)[:-1]
    o = np.broadcast_to(origins, np.shape(directions)).reshape(-1, 3)
    d = np.asarray(directions).reshape(-1, 3)
    nr = np.broadcast_to(np.asarray(near, dtype=np.float64), shape).reshape(-1)
    fr = np.broadcast_to(np.asarray(far, dtype=np.float64), shape).reshape(-1)
    z = np.asarray(z)
    zz = np.broadcast_to(z, (d.shape[0], z.shape[-1])) if z.ndim == 1 else z.reshape(-1, z.shape[-1])
    colors, depths, alphas = [], [], []
    for s in range(0, d.shape[0], chunk):
        sl = slice(s, s + chunk)
        out, _ = render_rays(field, background, zz[sl], o[sl], d[sl], nr[sl], fr[sl], n_samples,
                             None, alpha_premultiply)
        colors.append(out.color)
        depths.append(out.depth)
        alphas.append(out.alpha)
    return (np.concatenate(colors).reshape(*shape, 3), np.concatenate(depths).reshape(shape),
            np.concatenate(alphas).reshape(shape))
