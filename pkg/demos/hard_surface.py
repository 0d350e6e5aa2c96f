"""Why the hard-surface prior matters: one ray through a fuzzy slab.

A ray crosses a slab of constant density.  We ask the ray to become opaque
(the job the mask loss does during training) and descend on the densities,
once without and once with the hard-surface prior.  Opacity alone is
satisfied by a smear of medium-sized weights.  With the prior every weight
is pulled towards 0 or 1, and the ray terminates in one sample: a surface.

    python demos/hard_surface.py
"""

from __future__ import annotations

import numpy as np

from glonerf.losses import hard_loss, hard_loss_grad
from glonerf.render import composite_alpha, composite_depth, render_weights, weights_backward

n = 32
t = np.linspace(2.0, 4.0, n)
delta = np.full(n, t[1] - t[0])
sigma0 = np.where(np.abs(t - 3.0) < 0.4, 2.0, 0.0)


def show(label, sigma):
    w = render_weights(sigma, delta)
    alpha = composite_alpha(w)
    print(f"{label:>14}: alpha {alpha:.3f}  depth {composite_depth(w, t) / alpha:.3f}  "
          f"hard loss {hard_loss(w):+.4f}  largest weight {w.max():.3f}  "
          f"samples above 0.05: {int((w > 0.05).sum())}")


show("start", sigma0)
for lam in (0.0, 1.0):
    log_sigma = np.log(sigma0 + 1e-3)  # optimise log-density so it stays positive
    for _ in range(3000):
        s = np.exp(log_sigma)
        w = render_weights(s, delta)
        g_w = -2 * (1 - w.sum()) + lam * hard_loss_grad(w)  # d/dw of (1 - alpha)^2 + lam * prior
        log_sigma -= 0.5 * weights_backward(s, delta, w, g_w) * s
    show(f"prior weight {lam:g}", np.exp(log_sigma))
