"""Auto-decoder latent table, PCA latent distribution and test-time fitting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .optim import RowAdam

__all__ = [
    "LatentTable",
    "LatentDistribution",
    "table_lookup",
    "fit_distribution",
    "sample_latent",
    "fit_latent",
    "fit_latents",
]


class LatentTable:
    """K x D matrix of per-image codes, zero-initialised."""

    def __init__(self, num_rows: int, dim: int, dtype=np.float32):
        if num_rows < 1 or dim < 1:
            raise ValueError("latent table needs at least one row and one column")
        self.data = np.zeros((num_rows, dim), dtype=dtype)

    @classmethod
    def from_array(cls, data):
        data = np.asarray(data)
        table = cls(data.shape[0], data.shape[1], data.dtype)
        table.data[...] = data
        return table

    @property
    def num_rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __len__(self):
        return self.num_rows

    def _check(self, k):
        if not 0 <= k < self.num_rows:
            raise IndexError(f"latent row {k} out of range for table of {self.num_rows} rows")

    def lookup(self, k: int) -> np.ndarray:
        """The live row ``k`` (a view: optimiser updates show through)."""
        self._check(k)
        return self.data[k]

    def set_row(self, k: int, value):
        self._check(k)
        self.data[k] = value


def table_lookup(table: LatentTable, k: int) -> np.ndarray:
    return table.lookup(k)


@dataclass
class LatentDistribution:
    """Gaussian fitted to the table rows, kept in principal-axis form.

    ``components[:, i]`` is the i-th principal direction and ``variances[i]``
    the sample variance (1/(K-1) normalisation) along it, sorted descending.
    """

    mean: np.ndarray
    components: np.ndarray
    variances: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def covariance(self) -> np.ndarray:
        return (self.components * self.variances) @ self.components.T

    def project(self, rows) -> np.ndarray:
        return (np.asarray(rows, dtype=np.float64) - self.mean) @ self.components

    def reconstruct(self, coords) -> np.ndarray:
        return np.asarray(coords) @ self.components.T + self.mean


def fit_distribution(table) -> LatentDistribution:
    rows = np.asarray(table.data if isinstance(table, LatentTable) else table, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 2:
        raise ValueError("need at least two latent rows to fit a distribution")
    mean = rows.mean(axis=0)
    centered = rows - mean
    cov = centered.T @ centered / (rows.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    return LatentDistribution(mean, evecs[:, order], np.clip(evals[order], 0, None))


def sample_latent(dist: LatentDistribution, truncation: float, rng, size=None) -> np.ndarray:
    """Draw ``mean + truncation * sum_i g_i sqrt(var_i) component_i``.

    ``truncation = 0`` returns the mean exactly; 1 samples the fitted Gaussian.
    """
    if not 0 <= truncation <= 1:
        raise ValueError(f"truncation must lie in [0, 1], got {truncation}")
    shape = (dist.dim,) if size is None else (size, dist.dim)
    g = rng.standard_normal(shape)
    if truncation == 0:
        return np.broadcast_to(dist.mean, shape).copy()
    return dist.mean + truncation * (g * np.sqrt(dist.variances)) @ dist.components.T


def fit_latents(model, examples, init, steps=1000, lr=1e-3, pixels_per_step=256, loss_weights=None,
                seed=0, n_samples=None):
    """Fit one latent per example with the network frozen.

    ``init`` is a D-vector (typically the distribution mean) or one row per
    example.  Each step draws ``pixels_per_step`` random pixels from every
    example and applies one ADAM step to every row; rows are independent, so
    this is equivalent to fitting each example separately.
    """
    from .losses import LossWeights

    loss_weights = loss_weights or LossWeights()
    init = np.asarray(init, dtype=model.dtype)
    z = np.array(np.broadcast_to(init, (len(examples), model.latent_dim)), dtype=model.dtype)
    opt = RowAdam(z)
    rows = np.arange(len(examples))
    for step in range(steps):
        rng = np.random.default_rng([seed, step])
        batch = model.pixel_batch(examples, rows, pixels_per_step, rng)
        _, _, _, dz, _ = model.loss_and_grads(z[batch.rows], batch, loss_weights, rng,
                                               need_params=False, n_samples=n_samples)
        gz = np.zeros_like(z)
        np.add.at(gz, batch.rows, dz)
        opt.update(rows, gz, lr)
    return z


def fit_latent(model, example, dist: LatentDistribution | None = None, steps=1000, lr=1e-3,
               pixels_per_step=256, loss_weights=None, seed=0):
    """Latent reconstructing one unseen image, started from the table mean."""
    init = dist.mean if dist is not None else fit_distribution(model.latents).mean
    return fit_latents(model, [example], init, steps, lr, pixels_per_step, loss_weights, seed)[0]
