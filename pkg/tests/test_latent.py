from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from glonerf.latent import (LatentDistribution, LatentTable, fit_distribution, sample_latent,
                            table_lookup)
from glonerf.optim import Adam, RowAdam


def test_table_starts_at_zero():
    t = LatentTable(7, 5)
    assert t.data.shape == (7, 5)
    for k in range(7):
        np.testing.assert_array_equal(table_lookup(t, k), 0)


def test_table_row_round_trip_and_live_view():
    t = LatentTable(5, 3)
    t.set_row(3, [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(t.lookup(3), [1, 2, 3])
    view = t.lookup(2)
    t.data[2] += 4
    np.testing.assert_array_equal(view, 4)


@pytest.mark.parametrize("k", [5, -1, 100])
def test_table_bounds(k):
    with pytest.raises(IndexError):
        LatentTable(5, 3).lookup(k)


def test_identical_rows_have_zero_variance():
    rows = np.tile([0.3, -1.0, 2.0], (6, 1))
    dist = fit_distribution(rows)
    np.testing.assert_allclose(dist.variances, 0, atol=1e-15)
    np.testing.assert_allclose(dist.mean, rows[0])


def test_two_point_pca():
    # rows +-e1: centred sum of squares 2 along e1, divided by K - 1 = 1
    dist = fit_distribution(np.array([[1.0, 0, 0], [-1.0, 0, 0]]))
    assert abs(abs(dist.components[0, 0]) - 1) < 1e-12
    assert dist.variances[0] == pytest.approx(2.0)
    np.testing.assert_allclose(dist.variances[1:], 0, atol=1e-15)


def test_covariance_reconstruction(rng):
    rows = rng.normal(size=(100, 8)) @ rng.normal(size=(8, 8))
    dist = fit_distribution(rows)
    np.testing.assert_allclose(dist.covariance(), np.cov(rows, rowvar=False), atol=1e-6)
    np.testing.assert_allclose(dist.components.T @ dist.components, np.eye(8), atol=1e-6)
    assert np.all(np.diff(dist.variances) <= 0)
    recon = dist.reconstruct(dist.project(rows))
    np.testing.assert_allclose(recon - dist.mean, rows - rows.mean(0), atol=1e-5)


def test_fit_needs_two_rows():
    with pytest.raises(ValueError):
        fit_distribution(LatentTable(1, 4))


@given(st.integers(0, 2**32 - 1))
def test_full_truncation_returns_mean(seed):
    rng = np.random.default_rng(seed)
    dist = fit_distribution(rng.normal(size=(10, 4)))
    np.testing.assert_array_equal(sample_latent(dist, 0.0, rng), dist.mean)


def test_degenerate_distribution_samples_mean(rng):
    dist = fit_distribution(np.tile([1.0, 2.0], (4, 1)))
    np.testing.assert_allclose(sample_latent(dist, 1.0, rng), dist.mean, atol=1e-15)


def test_truncation_range(rng):
    dist = fit_distribution(rng.normal(size=(5, 2)))
    with pytest.raises(ValueError):
        sample_latent(dist, 1.5, rng)


def _known_distribution(rng, d=6):
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    return LatentDistribution(rng.normal(size=d), q, np.array([4.0, 2.0, 1.0, 0.5, 0.3, 0.1])[:d])


def test_sample_covariance_monte_carlo():
    rng = np.random.default_rng(7)
    dist = _known_distribution(rng)
    samples = sample_latent(dist, 1.0, rng, size=10_000)
    cov = dist.covariance()
    emp = np.cov(samples, rowvar=False)
    scale = np.sqrt(np.outer(np.diag(cov), np.diag(cov)))
    assert np.all(np.abs(emp - cov) <= 0.05 * scale)


def test_truncation_scales_deviation():
    rng = np.random.default_rng(8)
    dist = _known_distribution(rng)
    a = sample_latent(dist, 1.0, np.random.default_rng(3))
    b = sample_latent(dist, 0.5, np.random.default_rng(3))
    np.testing.assert_allclose(b - dist.mean, 0.5 * (a - dist.mean), atol=1e-12)


def test_refit_from_samples_converges():
    rng = np.random.default_rng(11)
    dist = _known_distribution(rng)
    refit = fit_distribution(sample_latent(dist, 1.0, rng, size=20_000))
    np.testing.assert_allclose(refit.variances, dist.variances, rtol=0.05)


# -- optimizers ---------------------------------------------------------------

def test_adam_matches_hand_computation():
    p = np.array([0.5])
    opt = Adam([p])
    g1, g2, lr = 0.2, -0.1, 1e-3
    opt.update([np.array([g1])], lr)
    opt.update([np.array([g2])], lr)
    m = 0.1 * g2 + 0.9 * (0.1 * g1)
    v = 0.001 * g2**2 + 0.999 * (0.001 * g1**2)
    step1 = lr * g1 / (abs(g1) + 1e-8)  # first step: bias-corrected m/sqrt(v) = sign(g)
    mhat, vhat = m / (1 - 0.9**2), v / (1 - 0.999**2)
    expected = 0.5 - step1 - lr * mhat / (np.sqrt(vhat) + 1e-8)
    assert p[0] == pytest.approx(expected, abs=1e-12)


def test_row_adam_leaves_other_rows_untouched(rng):
    table = rng.normal(size=(6, 3))
    before = table.copy()
    opt = RowAdam(table)
    opt.update(np.array([1, 4]), rng.normal(size=(2, 3)), 1e-2)
    untouched = [0, 2, 3, 5]
    np.testing.assert_array_equal(table[untouched], before[untouched])
    assert not np.array_equal(table[[1, 4]], before[[1, 4]])
    np.testing.assert_array_equal(opt.counts, [0, 1, 0, 0, 1, 0])


def test_row_adam_matches_dense_adam_per_row(rng):
    table = rng.normal(size=(3, 2))
    dense = table[1].copy()
    opt, ref = RowAdam(table), Adam([dense])
    for _ in range(4):
        g = rng.normal(size=2)
        opt.update(np.array([1]), g[None], 1e-2)
        ref.update([g], 1e-2)
    np.testing.assert_allclose(table[1], dense, atol=1e-15)


def test_row_adam_requires_unique_rows(rng):
    with pytest.raises(ValueError):
        RowAdam(np.zeros((3, 2))).update(np.array([1, 1]), np.zeros((2, 2)), 1e-3)
