from __future__ import annotations

import csv
import dataclasses
import math

import numpy as np
import pytest

from glonerf.camera import CameraIntrinsics, LandmarkSet, orbit_extrinsics
from glonerf.checkpoint import (CheckpointError, load_checkpoint, load_latent, save_checkpoint,
                                save_latent)
from glonerf.dataset import TrainingExample
from glonerf.latent import fit_distribution, fit_latent
from glonerf.losses import rgb_loss
from glonerf.model import LatentNeRF
from glonerf.train import (METRICS_HEADER, TrainConfig, TrainingError, TrainState, lr_at,
                           read_config_file, sample_ray_batch, train, train_step)

TINY = TrainConfig(pixels_per_image=16, images_per_batch=3, total_steps=20, samples_per_ray=12,
                   num_bands=2, width=16, depth=2, latent_dim=4, bg_width=16, bg_layers=2,
                   bg_bands=1, checkpoint_interval=5, log_interval=5)


def _fake_examples(k, size=4):
    intr = CameraIntrinsics.centered(5.0, size, size)
    extr = orbit_extrinsics(0, 0, 3.0)
    rng = np.random.default_rng(0)
    return [TrainingExample(i, f"{i:06d}", rng.uniform(size=(size, size, 3)).astype(np.float32),
                            LandmarkSet(np.zeros((1, 2))), None, extr, intr) for i in range(k)]


def _image_loss(model, z, ex):
    color, _, _ = model.render_view(z, ex.extrinsics, ex.intrinsics)
    return float(np.mean([rgb_loss(c, t) for c, t in zip(color.reshape(-1, 3),
                                                         ex.image.reshape(-1, 3))]))


# -- schedule and batching ----------------------------------------------------

def test_lr_schedule_examples():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == pytest.approx(5e-4, rel=1e-12)
    assert lr_at(cfg.total_steps, cfg) == pytest.approx(1e-4, rel=1e-12)
    assert lr_at(cfg.total_steps // 2, cfg) == pytest.approx(math.sqrt(5e-4 * 1e-4), rel=1e-12)
    assert lr_at(cfg.total_steps // 2, cfg) == pytest.approx(2.2360e-4, abs=1e-8)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_start=1e-4, lr_end=5e-4)
    with pytest.raises(ValueError):
        TrainConfig(images_per_batch=0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"no_such_key": 1})


def test_config_file(tmp_path):
    (tmp_path / "c.txt").write_text("# desk run\nwidth = 32\nlambda_hard = 0  # ablation\n"
                                    "alpha_premultiply = true\nnear = none\n")
    cfg = TrainConfig.from_dict(read_config_file(tmp_path / "c.txt"))
    assert (cfg.width, cfg.lambda_hard, cfg.alpha_premultiply, cfg.near) == (32, 0.0, True, None)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_single_image_batch():
    ex = _fake_examples(1)
    model = LatentNeRF.create(TINY.model_config, 1)
    batch = sample_ray_batch(model, ex, TINY, np.random.default_rng(0))
    assert len(batch.rows) == 16
    np.testing.assert_array_equal(batch.rows, 0)


def test_batch_construction():
    ex = _fake_examples(100)
    cfg = TINY.replace(images_per_batch=10, pixels_per_image=32)
    model = LatentNeRF.create(cfg.model_config, 100)
    batch = sample_ray_batch(model, ex, cfg, np.random.default_rng(1))
    assert len(batch.rows) == 320
    assert len(np.unique(batch.rows)) == 10
    # each ray's target is the pixel it passes through
    for r in range(0, 320, 37):
        ex_r = ex[batch.rows[r]]
        np.testing.assert_array_equal(batch.target[r], ex_r.image.reshape(-1, 3)[batch.pixels[r]])
        np.testing.assert_allclose(batch.directions[r], ex_r.rays()[1][batch.pixels[r]], atol=1e-6)


def test_image_selection_frequency():
    k, per, n = 20, 5, 10_000
    ex = _fake_examples(k, size=2)
    cfg = TINY.replace(images_per_batch=per, pixels_per_image=1)
    model = LatentNeRF.create(cfg.model_config, k)
    counts = np.zeros(k)
    rng = np.random.default_rng(42)
    for _ in range(n):
        counts[np.unique(sample_ray_batch(model, ex, cfg, rng).rows)] += 1
    p = per / k
    assert np.all(np.abs(counts - n * p) <= 3 * math.sqrt(n * p * (1 - p)))


# -- single steps -------------------------------------------------------------

def _state(dataset, dtype=np.float32, cfg=TINY):
    return TrainState(LatentNeRF.create(cfg.model_config, len(dataset), cfg.seed, dtype))


def test_first_step_matches_hand_adam(small_dataset):
    state = _state(small_dataset, np.float64)
    batch = sample_ray_batch(state.model, small_dataset, TINY, np.random.default_rng(0))
    before = [p.copy() for p in state.model.parameters()]
    _, fg, bg, _, _ = state.model.loss_and_grads(state.model.latents.data[batch.rows], batch,
                                                 TINY.loss_weights)
    lr = 1e-3
    train_step(state, batch, TINY, rng=None, lr=lr)
    for p0, g, p in zip(before, fg + bg, state.model.parameters()):
        # first ADAM step: bias-corrected m / sqrt(v) = g / |g|
        np.testing.assert_allclose(p, p0 - lr * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-12)


def test_steps_are_deterministic(small_dataset):
    a, b = _state(small_dataset), _state(small_dataset)
    for s in range(3):
        for st in (a, b):
            rng = np.random.default_rng([0, s])
            train_step(st, sample_ray_batch(st.model, small_dataset, TINY, rng), TINY, rng)
    for pa, pb in zip(a.model.parameters() + [a.model.latents.data],
                      b.model.parameters() + [b.model.latents.data]):
        np.testing.assert_array_equal(pa, pb)


def test_latent_rows_outside_batch_untouched(small_dataset):
    state = _state(small_dataset)
    state.model.latents.data[...] = np.random.default_rng(3).normal(size=state.model.latents.data.shape)
    before = state.model.latents.data.copy()
    rng = np.random.default_rng(7)
    batch = sample_ray_batch(state.model, small_dataset, TINY, rng)
    train_step(state, batch, TINY, rng)
    inside = np.unique(batch.rows)
    outside = np.setdiff1d(np.arange(len(small_dataset)), inside)
    assert outside.size == 3
    np.testing.assert_array_equal(state.model.latents.data[outside], before[outside])
    assert np.all(np.any(state.model.latents.data[inside] != before[inside], axis=1))


def test_gradient_isolation_by_perturbation(small_dataset):
    model = LatentNeRF.create(TINY.model_config, len(small_dataset), dtype=np.float64)
    model.latents.data[...] = np.random.default_rng(2).normal(size=model.latents.data.shape)
    batch = sample_ray_batch(model, small_dataset, TINY, np.random.default_rng(5))
    absent = np.setdiff1d(np.arange(len(small_dataset)), batch.rows)[0]
    present = batch.rows[0]

    def loss():
        return model.loss_and_grads(model.latents.data[batch.rows], batch, TINY.loss_weights,
                                    need_params=False)[0].total

    base = loss()
    model.latents.data[absent] += 0.5
    assert loss() == base
    model.latents.data[present] += 0.5
    assert loss() != base


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts(small_dataset):
    state = _state(small_dataset)
    state.model.field.mlp.weights[0][...] = np.nan
    rng = np.random.default_rng(0)
    with pytest.raises(TrainingError, match=r"step 0: term rgb"):
        train_step(state, sample_ray_batch(state.model, small_dataset, TINY, rng), TINY, rng)


def _crop(ex, lo, size):
    intr = dataclasses.replace(ex.intrinsics, cx=ex.intrinsics.cx - lo, cy=ex.intrinsics.cy - lo,
                               width=size, height=size)
    sl = (slice(lo, lo + size), slice(lo, lo + size))
    return TrainingExample(0, ex.name, ex.image[sl].copy(), ex.landmarks, ex.mask[sl].copy(),
                           ex.extrinsics, intr)


def test_overfit_single_crop(small_dataset):
    ex = _crop(small_dataset[0], 4, 16)
    cfg = TrainConfig(pixels_per_image=64, images_per_batch=1, total_steps=2000, lambda_mask=0,
                      lambda_hard=0, samples_per_ray=32, num_bands=4, width=32, depth=2,
                      latent_dim=4, bg_width=32, bg_layers=2, bg_bands=2)
    state = _state([ex], cfg=cfg)
    start = _image_loss(state.model, state.model.latents.lookup(0), ex)
    for s in range(cfg.total_steps):
        rng = np.random.default_rng([0, s])
        train_step(state, sample_ray_batch(state.model, [ex], cfg, rng), cfg, rng)
    end = _image_loss(state.model, state.model.latents.lookup(0), ex)
    assert end <= start / 10


# -- the training loop --------------------------------------------------------

def _read_metrics(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_train_writes_checkpoints_and_metrics(small_dataset, tmp_path):
    state = train(small_dataset, TINY, tmp_path)
    assert state.step == 20
    rows = _read_metrics(tmp_path / "metrics.csv")
    assert rows[0] == METRICS_HEADER
    assert len(rows) - 1 == TINY.total_steps // TINY.log_interval
    assert [int(r[0]) for r in rows[1:]] == [5, 10, 15, 20]
    names = sorted(p.name for p in tmp_path.glob("*.ckpt"))
    assert names == [f"checkpoint_{s:07d}.ckpt" for s in (5, 10, 15, 20)] + ["model.ckpt"]


def test_resume_is_bit_identical(small_dataset, tmp_path):
    full = train(small_dataset, TINY, tmp_path / "full")
    train(small_dataset, TINY, tmp_path / "part", stop_at=10)
    resumed = train(small_dataset, TINY, tmp_path / "part",
                    resume=tmp_path / "part" / "checkpoint_0000010.ckpt")
    for a, b in zip(full.model.parameters() + [full.model.latents.data],
                    resumed.model.parameters() + [resumed.model.latents.data]):
        np.testing.assert_array_equal(a, b)
    sa, sb = full.optimizer_state(), resumed.optimizer_state()
    assert sa["step"] == sb["step"]
    for a, b in zip(sa["m"] + sa["v"], sb["m"] + sb["v"]):
        np.testing.assert_array_equal(a, b)
    fa = [r[:6] for r in _read_metrics(tmp_path / "full" / "metrics.csv")]
    fb = [r[:6] for r in _read_metrics(tmp_path / "part" / "metrics.csv")]
    assert fa == fb


def test_resume_with_changed_config_fails(small_dataset, tmp_path):
    train(small_dataset, TINY, tmp_path, stop_at=5)
    with pytest.raises(TrainingError, match="width"):
        train(small_dataset, TINY.replace(width=8), tmp_path, resume=tmp_path / "model.ckpt")
    # logging cadence may change freely
    train(small_dataset, TINY.replace(log_interval=2), tmp_path, resume=tmp_path / "model.ckpt",
          stop_at=6)


def test_resume_with_wrong_dataset_fails(small_dataset, tmp_path):
    train(small_dataset, TINY, tmp_path, stop_at=5)
    with pytest.raises(TrainingError, match="latents"):
        train(small_dataset.examples[:4], TINY, tmp_path, resume=tmp_path / "model.ckpt")


# -- checkpoints --------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_identical(small_dataset, tmp_path):
    state = train(small_dataset, TINY, tmp_path, stop_at=5)
    model, info = load_checkpoint(tmp_path / "model.ckpt")
    assert info["step"] == 5
    assert TrainConfig.from_dict(info["train_config"]) == TINY
    for a, b in zip(state.model.parameters() + [state.model.latents.data],
                    model.parameters() + [model.latents.data]):
        assert a.dtype == b.dtype
        np.testing.assert_array_equal(a, b)
    assert model.config == state.model.config
    save_checkpoint(tmp_path / "again.ckpt", model, info["step"], info["train_config"],
                    info["optimizer"])
    assert (tmp_path / "again.ckpt").read_bytes() == (tmp_path / "model.ckpt").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"definitely not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.ckpt")


def test_latent_file_round_trip(tmp_path, rng):
    z = rng.normal(size=32).astype(np.float32)
    save_latent(tmp_path / "z.lat", z)
    out = load_latent(tmp_path / "z.lat")
    assert out.dtype == np.float32
    np.testing.assert_array_equal(out, z)
    raw = (tmp_path / "z.lat").read_bytes()
    assert raw[:8] == b"GNRFLATN" and len(raw) == 16 + 4 * 32


# -- test-time latent fitting -------------------------------------------------

@pytest.fixture(scope="module")
def trained(small_dataset, tmp_path_factory):
    cfg = TrainConfig(pixels_per_image=32, images_per_batch=6, total_steps=1500, samples_per_ray=24,
                      num_bands=4, width=32, depth=2, latent_dim=8, bg_width=32, bg_layers=2,
                      bg_bands=2, checkpoint_interval=1500, log_interval=500)
    return train(small_dataset, cfg, tmp_path_factory.mktemp("fit")).model


def _checksum(model):
    return [p.copy() for p in model.parameters()]


def test_fit_zero_steps_returns_mean(trained, small_dataset):
    z = fit_latent(trained, small_dataset[0], steps=0)
    np.testing.assert_array_equal(z, fit_distribution(trained.latents).mean.astype(trained.dtype))


def test_fit_is_deterministic_and_leaves_weights(trained, small_dataset):
    before = _checksum(trained)
    table = trained.latents.data.copy()
    a = fit_latent(trained, small_dataset[1], steps=20, lr=1e-2, seed=4)
    b = fit_latent(trained, small_dataset[1], steps=20, lr=1e-2, seed=4)
    np.testing.assert_array_equal(a, b)
    for p, q in zip(before, trained.parameters()):
        np.testing.assert_array_equal(p, q)
    np.testing.assert_array_equal(table, trained.latents.data)


def test_fit_matches_training_loss(trained, small_dataset):
    for ex in small_dataset.examples[:3]:
        table_loss = _image_loss(trained, trained.latents.lookup(ex.index), ex)
        z = fit_latent(trained, ex)
        assert _image_loss(trained, z, ex) <= 2 * table_loss
