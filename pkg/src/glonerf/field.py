"""Latent-conditioned radiance field and per-ray background model.

Both networks are plain ReLU MLPs with a handwritten reverse pass.  Inputs are
given as a list of blocks shaped ``(R, N, d)`` (one row per ray sample) or
``(R, 1, d)`` (one row per ray, broadcast over the samples); the first layer
keeps one weight slab per block so a per-ray latent code is multiplied once
per ray instead of once per sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Sequence

import numpy as np

__all__ = [
    "EncodingConfig",
    "positional_encode",
    "encode_backward",
    "MLP",
    "FieldModel",
    "BackgroundModel",
    "GradientBundle",
    "eval_field",
    "eval_background",
    "backward",
    "softplus",
    "sigmoid",
]


@dataclass(frozen=True)
class EncodingConfig:
    num_bands: int = 10

    def __post_init__(self):
        if self.num_bands < 1:
            raise ValueError(f"num_bands must be >= 1, got {self.num_bands}")

    @property
    def dim(self) -> int:
        return 3 + 6 * self.num_bands


def _bands(cfg) -> int:
    return cfg.num_bands if isinstance(cfg, EncodingConfig) else int(cfg)


def positional_encode(x, cfg) -> np.ndarray:
    """Map ``(..., 3)`` coordinates to ``(..., 3 + 6L)`` Fourier features.

    Layout is ``[x, sin(pi x), cos(pi x), sin(2 pi x), cos(2 pi x), ...]``,
    each sin/cos block holding the three coordinates.
    """
    num_bands = _bands(cfg)
    if num_bands < 1:
        raise ValueError("num_bands must be >= 1")
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    freqs = (2.0 ** np.arange(num_bands) * np.pi).astype(x.dtype)
    scaled = x[..., None, :] * freqs[:, None]  # (..., L, 3)
    sc = np.stack([np.sin(scaled), np.cos(scaled)], axis=-2)  # (..., L, 2, 3)
    return np.concatenate([x, sc.reshape(*x.shape[:-1], 6 * num_bands)], axis=-1)


def encode_backward(x, cfg, grad_enc) -> np.ndarray:
    """Pull a gradient w.r.t. the encoding back to the raw coordinates."""
    num_bands = _bands(cfg)
    x = np.asarray(x)
    freqs = (2.0 ** np.arange(num_bands) * np.pi).astype(x.dtype)
    scaled = x[..., None, :] * freqs[:, None]
    g = grad_enc[..., 3:].reshape(*x.shape[:-1], num_bands, 2, 3)
    dscaled = g[..., 0, :] * np.cos(scaled) - g[..., 1, :] * np.sin(scaled)
    return grad_enc[..., :3] + (dscaled * freqs[:, None]).sum(axis=-2)


def softplus(x):
    return np.logaddexp(0, x)


def sigmoid(x):
    # exp of -|x| only, so large magnitudes never overflow
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(np.result_type(x), copy=False)


def _affine(a, w):
    """``a @ w.T`` for ``a`` of shape ``(R, N, d)``."""
    r, n, d = a.shape
    return (a.reshape(r * n, d) @ w.T).reshape(r, n, w.shape[0])


def _flush_level(dtype):
    # 2**24 above the smallest normal, so products with O(1) weights stay normal
    return np.finfo(dtype).tiny * 2.0 ** 24


def _flush_tiny(x):
    """Copy of ``x`` with entries too small to matter set to zero.

    Upstream gradients through nearly-opaque rays underflow towards the
    subnormal range, where matrix products run several times slower.  The
    flushed entries (below about 2e-31 in float32) move an ADAM update by
    less than 1e-22.
    """
    x = np.array(x, copy=True)
    np.copyto(x, 0, where=np.abs(x) < _flush_level(x.dtype))
    return x


def _outer_sum(g, a):
    """Sum over rays and samples of ``g a^T``; ``a`` may broadcast over N."""
    if a.shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    r, n, _ = g.shape
    return g.reshape(r * n, -1).T @ a.reshape(r * n, -1)


class MLP:
    """Dense ReLU network with a linear output layer.

    ``weights[i]`` has shape ``(out, in)``.  ``input_dims`` lists the widths of
    the input blocks concatenated at layer 0 (and again at ``skip``, if set).
    """

    def __init__(self, weights, biases, input_dims: Sequence[int], skip: int | None = None):
        self.weights = list(weights)
        self.biases = list(biases)
        self.input_dims = tuple(int(d) for d in input_dims)
        self.skip = skip
        if len(self.weights) != len(self.biases) or len(self.weights) < 1:
            raise ValueError("weights and biases must be non-empty and of equal length")
        self._check_shapes()

    @classmethod
    def create(cls, input_dims, width, num_hidden, out_dim, rng, skip=None, dtype=np.float32):
        input_dims = tuple(input_dims)
        total_in = sum(input_dims)
        fan_ins = [total_in] + [width + (total_in if i == skip else 0) for i in range(1, num_hidden)]
        fan_ins.append(width)
        outs = [width] * num_hidden + [out_dim]
        weights, biases = [], []
        for fan_in, out in zip(fan_ins, outs):
            limit = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-limit, limit, size=(out, fan_in)).astype(dtype))
            biases.append(np.zeros(out, dtype=dtype))
        return cls(weights, biases, input_dims, skip)

    def _check_shapes(self):
        total_in = sum(self.input_dims)
        prev = None
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: bad shapes {w.shape} / {b.shape}")
            expected = total_in if i == 0 else prev + (total_in if i == self.skip else 0)
            if w.shape[1] != expected:
                raise ValueError(f"layer {i}: expected {expected} inputs, got {w.shape[1]}")
            prev = w.shape[0]
        if self.skip is not None and not 0 < self.skip < len(self.weights):
            raise ValueError(f"skip layer {self.skip} out of range")

    @property
    def dtype(self):
        return self.weights[0].dtype

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self, dtype=None) -> MLP:
        dtype = dtype or self.dtype
        return MLP([w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases],
                   self.input_dims, self.skip)

    def _split(self, w, lead: int):
        cols, start = [], lead
        for d in self.input_dims:
            cols.append(w[:, start:start + d])
            start += d
        return cols

    def forward(self, inputs):
        if len(inputs) != len(self.input_dims):
            raise ValueError(f"expected {len(self.input_dims)} input blocks, got {len(inputs)}")
        for a, d in zip(inputs, self.input_dims):
            if a.ndim != 3 or a.shape[-1] != d:
                raise ValueError(f"input block of shape {a.shape} does not match width {d}")
        hidden = []
        h = None
        n_layers = len(self.weights)
        for i in range(n_layers):
            w, b = self.weights[i], self.biases[i]
            if i == 0 or i == self.skip:
                lead = 0 if i == 0 else h.shape[-1]
                pre = _affine(h, w[:, :lead]) if lead else 0
                for a, wc in zip(inputs, self._split(w, lead)):
                    pre = pre + _affine(a, wc)
                pre += b
            else:
                pre = _affine(h, w)
                pre += b
            if i < n_layers - 1:
                h = np.maximum(pre, 0, out=pre)
                hidden.append(h)
            else:
                out = pre
        return out, (tuple(inputs), hidden)

    def backward(self, cache, d_out, input_grads=None, param_grads=True):
        """Return ``(layer_grads, block_grads)``.

        ``layer_grads`` alternates weight and bias gradients in layer order
        (None when ``param_grads`` is false).  ``block_grads[j]`` is None
        unless ``input_grads[j]`` is true.
        """
        inputs, hidden = cache
        n_layers = len(self.weights)
        if input_grads is None:
            input_grads = (False,) * len(inputs)
        block_grads = [np.zeros(a.shape, dtype=d_out.dtype) if want else None
                       for a, want in zip(inputs, input_grads)]
        grads = [None] * (2 * n_layers)
        delta = _flush_tiny(d_out)
        for i in range(n_layers - 1, -1, -1):
            w = self.weights[i]
            if param_grads:
                grads[2 * i + 1] = delta.sum(axis=(0, 1))
            if i == 0 or i == self.skip:
                lead = 0 if i == 0 else hidden[i - 1].shape[-1]
                pieces = []
                if lead and param_grads:
                    pieces.append(_outer_sum(delta, hidden[i - 1]))
                for j, (a, wc) in enumerate(zip(inputs, self._split(w, lead))):
                    if param_grads:
                        pieces.append(_outer_sum(delta, a))
                    if input_grads[j]:
                        g = delta.sum(axis=1, keepdims=True) if a.shape[1] == 1 else delta
                        block_grads[j] += _affine(g, wc.T)
                if param_grads:
                    grads[2 * i] = np.concatenate(pieces, axis=1)
                if i == 0:
                    break
                delta = _affine(delta, w[:, :lead].T)
            else:
                if param_grads:
                    grads[2 * i] = _outer_sum(delta, hidden[i - 1])
                delta = _affine(delta, w.T)
            # gate by the relu and flush near-subnormal values, which slow matrix products
            delta *= (hidden[i - 1] > 0) & (np.abs(delta) >= _flush_level(delta.dtype))
        return (grads if param_grads else None), block_grads


@dataclass
class FieldModel:
    """Foreground density/radiance network conditioned on a latent code.

    Density is ``softplus`` of the first output, radiance is ``sigmoid`` of the
    other three.  There is no view-direction input.
    """

    mlp: MLP
    encoding: EncodingConfig
    latent_dim: int

    @classmethod
    def create(cls, latent_dim=32, width=64, depth=4, num_bands=10, skip=None, seed=0,
               dtype=np.float32):
        enc = EncodingConfig(num_bands)
        rng = np.random.default_rng(seed)
        mlp = MLP.create((enc.dim, latent_dim), width, depth, 4, rng, skip=skip, dtype=dtype)
        return cls(mlp, enc, latent_dim)

    def parameters(self):
        return self.mlp.parameters()

    def copy(self, dtype=None) -> FieldModel:
        return FieldModel(self.mlp.copy(dtype), self.encoding, self.latent_dim)

    def forward(self, z, x):
        """``z``: ``(R, D)``; ``x``: ``(R, N, 3)``.  Returns sigma ``(R, N)``, rgb ``(R, N, 3)``, cache."""
        z = np.asarray(z, dtype=self.mlp.dtype)
        x = np.asarray(x, dtype=self.mlp.dtype)
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"latent must have shape (R, {self.latent_dim}), got {z.shape}")
        if x.ndim != 3 or x.shape[0] != z.shape[0] or x.shape[2] != 3:
            raise ValueError(f"positions must have shape (R, N, 3) matching R={z.shape[0]}")
        enc = positional_encode(x, self.encoding)
        out, mlp_cache = self.mlp.forward([enc, z[:, None, :]])
        sigma = softplus(out[..., 0])
        rgb = sigmoid(out[..., 1:])
        return sigma, rgb, (x, out, rgb, mlp_cache)

    def backward(self, cache, d_sigma, d_rgb, want_x=False, param_grads=True):
        """Returns ``(param_grads, dz (R, D), dx (R, N, 3) or None)``."""
        x, out, rgb, mlp_cache = cache
        d_out = np.empty_like(out)
        d_out[..., 0] = d_sigma * sigmoid(out[..., 0])
        d_out[..., 1:] = d_rgb * rgb * (1 - rgb)
        grads, (d_enc, d_z) = self.mlp.backward(mlp_cache, d_out, (want_x, True), param_grads)
        dx = encode_backward(x, self.encoding, d_enc) if want_x else None
        return grads, d_z[:, 0, :], dx


@dataclass
class BackgroundModel:
    """Per-ray background colour from the (encoded) ray direction and latent code."""

    mlp: MLP
    encoding: EncodingConfig
    latent_dim: int

    @classmethod
    def create(cls, latent_dim=32, width=256, num_layers=5, num_bands=4, seed=1, dtype=np.float32):
        enc = EncodingConfig(num_bands)
        rng = np.random.default_rng(seed)
        mlp = MLP.create((enc.dim, latent_dim), width, num_layers - 1, 3, rng, dtype=dtype)
        return cls(mlp, enc, latent_dim)

    def parameters(self):
        return self.mlp.parameters()

    def copy(self, dtype=None) -> BackgroundModel:
        return BackgroundModel(self.mlp.copy(dtype), self.encoding, self.latent_dim)

    def forward(self, z, d):
        """``z``: ``(R, D)``; ``d``: ``(R, 3)`` unit directions.  Returns rgb ``(R, 3)``, cache."""
        z = np.asarray(z, dtype=self.mlp.dtype)
        d = np.asarray(d, dtype=self.mlp.dtype)
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"latent must have shape (R, {self.latent_dim}), got {z.shape}")
        enc = positional_encode(d, self.encoding)
        out, mlp_cache = self.mlp.forward([enc[:, None, :], z[:, None, :]])
        rgb = sigmoid(out[:, 0, :])
        return rgb, (d, rgb, mlp_cache)

    def backward(self, cache, d_rgb, want_d=False, param_grads=True):
        d, rgb, mlp_cache = cache
        d_out = (d_rgb * rgb * (1 - rgb))[:, None, :]
        grads, (d_enc, d_z) = self.mlp.backward(mlp_cache, d_out, (want_d, True), param_grads)
        dd = encode_backward(d, self.encoding, d_enc[:, 0]) if want_d else None
        return grads, d_z[:, 0, :], dd


@dataclass
class GradientBundle:
    """Gradients of a scalar objective; every block mirrors its parameter block."""

    loss: float = 0.0
    field: list = dc_field(default_factory=list)
    background: list = dc_field(default_factory=list)
    latent_rows: np.ndarray = dc_field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    latent_grads: np.ndarray | None = None
    dz: np.ndarray | None = None
    dx: np.ndarray | None = None


def eval_field(model: FieldModel, z, x):
    """Density and colour at a single point ``x`` for latent ``z``."""
    z = np.asarray(z)
    if z.shape != (model.latent_dim,):
        raise ValueError(f"latent must have length {model.latent_dim}, got shape {z.shape}")
    sigma, rgb, _ = model.forward(z[None], np.asarray(x)[None, None])
    return float(sigma[0, 0]), rgb[0, 0]


def eval_background(model: BackgroundModel, z, d, tol=1e-6):
    d = np.asarray(d, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > tol:
        raise ValueError(f"direction must be unit length (|d| = {np.linalg.norm(d)})")
    z = np.asarray(z)
    if z.shape != (model.latent_dim,):
        raise ValueError(f"latent must have length {model.latent_dim}, got shape {z.shape}")
    rgb, _ = model.forward(z[None], d[None])
    return rgb[0]


def backward(model: FieldModel, z, x, upstream) -> GradientBundle:
    """Reverse pass of :func:`eval_field` contracted with ``upstream = (d_sigma, d_r, d_g, d_b)``."""
    upstream = np.asarray(upstream, dtype=model.mlp.dtype)
    if upstream.shape != (4,):
        raise ValueError(f"upstream must be a 4-vector, got shape {upstream.shape}")
    z = np.asarray(z)
    if z.shape != (model.latent_dim,):
        raise ValueError(f"latent must have length {model.latent_dim}, got shape {z.shape}")
    sigma, rgb, cache = model.forward(z[None], np.asarray(x)[None, None])
    grads, dz, dx = model.backward(cache, upstream[0].reshape(1, 1), upstream[1:].reshape(1, 1, 3),
                                   want_x=True)
    value = float(upstream[0] * sigma[0, 0] + upstream[1:] @ rgb[0, 0])
    return GradientBundle(loss=value, field=grads, dz=dz[0], dx=dx[0, 0])
