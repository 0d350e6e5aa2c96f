"""ADAM for dense parameter blocks and for sparsely-touched latent rows."""

from __future__ import annotations

import numpy as np

__all__ = ["Adam", "RowAdam"]


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.step = 0

    def update(self, grads, lr):
        if len(grads) != len(self.params):
            raise ValueError(f"expected {len(self.params)} gradient blocks, got {len(grads)}")
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.step
        c2 = 1 - b2 ** self.step
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)

    def state(self):
        return {"step": self.step, "m": self.m, "v": self.v}

    def load_state(self, step, m, v):
        for dst, src in zip(self.m + self.v, list(m) + list(v)):
            if dst.shape != src.shape:
                raise ValueError("optimizer state shape mismatch")
            dst[...] = src
        self.step = int(step)


class RowAdam:
    """ADAM over the rows of a matrix where each step touches only some rows.

    Rows that receive no gradient keep their values and moments untouched.
    Bias correction uses each row's own update count.
    """

    def __init__(self, table: np.ndarray, beta1=0.9, beta2=0.999, eps=1e-8):
        self.table = table
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros_like(table)
        self.v = np.zeros_like(table)
        self.counts = np.zeros(table.shape[0], dtype=np.int64)

    def update(self, rows, grads, lr):
        rows = np.asarray(rows, dtype=np.int64)
        if len(np.unique(rows)) != len(rows):
            raise ValueError("rows must be unique; sum their gradients first")
        b1, b2 = self.beta1, self.beta2
        self.counts[rows] += 1
        n = self.counts[rows][:, None].astype(np.float64)
        m = b1 * self.m[rows] + (1 - b1) * grads
        v = b2 * self.v[rows] + (1 - b2) * grads * grads
        self.m[rows] = m
        self.v[rows] = v
        c1 = (1 - b1 ** n).astype(self.table.dtype)
        c2 = (1 - b2 ** n).astype(self.table.dtype)
        self.table[rows] -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(self.table.dtype)
