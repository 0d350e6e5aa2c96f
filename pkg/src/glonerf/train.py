"""Training loop: batched rays from many images, joint ADAM on weights and latent rows."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .losses import LossWeights
from .model import LatentNeRF, ModelConfig, RayBatch
from .optim import Adam, RowAdam

__all__ = [
    "TrainConfig",
    "TrainingError",
    "TrainState",
    "METRICS_HEADER",
    "lr_at",
    "read_config_file",
    "sample_ray_batch",
    "train_step",
    "train",
]

log = logging.getLogger(__name__)

METRICS_HEADER = ["step", "lr", "loss_rgb", "loss_mask", "loss_hard", "loss_total", "wall_time"]

# keys that may differ between a checkpoint and the run resuming it
_RESUME_FREE = {"checkpoint_interval", "log_interval"}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    pixels_per_image: int = 32
    images_per_batch: int = 8
    total_steps: int = 30000
    lr_start: float = 5e-4
    lr_end: float = 1e-4
    lambda_mask: float = 1.0
    lambda_hard: float = 0.1
    samples_per_ray: int = 64
    num_bands: int = 6
    width: int = 64
    depth: int = 4
    latent_dim: int = 32
    skip: int | None = None
    bg_width: int = 256
    bg_layers: int = 5
    bg_bands: int = 4
    scene_radius: float = 1.0
    near: float | None = None
    far: float | None = None
    alpha_premultiply: bool = False
    seed: int = 0
    checkpoint_interval: int = 5000
    log_interval: int = 100

    def __post_init__(self):
        for name in ("pixels_per_image", "images_per_batch", "total_steps", "samples_per_ray",
                     "num_bands", "width", "depth", "latent_dim", "checkpoint_interval",
                     "log_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not (self.lr_start >= self.lr_end > 0):
            raise ValueError("need lr_start >= lr_end > 0")
        LossWeights(self.lambda_mask, self.lambda_hard)

    @property
    def model_config(self) -> ModelConfig:
        return ModelConfig(latent_dim=self.latent_dim, width=self.width, depth=self.depth,
                           num_bands=self.num_bands, skip=self.skip, bg_width=self.bg_width,
                           bg_layers=self.bg_layers, bg_bands=self.bg_bands,
                           n_samples=self.samples_per_ray, scene_radius=self.scene_radius,
                           near=self.near, far=self.far, alpha_premultiply=self.alpha_premultiply)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_mask, self.lambda_hard)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**{k: _coerce(cls, k, v) for k, v in d.items()})

    def replace(self, **changes) -> TrainConfig:
        return TrainConfig.from_dict({**self.to_dict(), **changes})


def _coerce(cls, key, value):
    if not isinstance(value, str):
        return value
    default = next(f.default for f in fields(cls) if f.name == key)
    v = value.strip()
    if v.lower() in ("none", "null", ""):
        return None
    if isinstance(default, bool):
        if v.lower() in ("1", "true", "yes", "on"):
            return True
        if v.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(default, int) or key == "skip":
        return int(v)
    return float(v)


def read_config_file(path) -> dict:
    """Flat ``key = value`` (or ``key value``) lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            key, _, val = line.partition(" ")
        key, val = key.strip(), val.strip()
        if not key or not val:
            raise ValueError(f"{path}:{n}: expected 'key = value'")
        out[key] = val
    return out


def lr_at(step: int, config: TrainConfig) -> float:
    """Exponential decay from ``lr_start`` at step 0 to ``lr_end`` at ``total_steps``."""
    frac = step / config.total_steps
    return config.lr_start * (config.lr_end / config.lr_start) ** frac


def sample_ray_batch(model: LatentNeRF, examples, config: TrainConfig, rng) -> RayBatch:
    """Distinct images uniformly without replacement, pixels uniformly with replacement."""
    k = len(examples)
    if k == 0:
        raise ValueError("empty dataset")
    n = min(config.images_per_batch, k)
    chosen = np.sort(rng.choice(k, size=n, replace=False))
    return model.pixel_batch([examples[i] for i in chosen], chosen, config.pixels_per_image, rng)


class TrainState:
    """Model plus the two optimizers and the number of completed steps."""

    def __init__(self, model: LatentNeRF, step: int = 0):
        self.model = model
        self.net_opt = Adam(model.parameters())
        self.latent_opt = RowAdam(model.latents.data)
        self.step = step

    def optimizer_state(self) -> dict:
        return {"step": self.net_opt.step, "m": self.net_opt.m, "v": self.net_opt.v,
                "latent_m": self.latent_opt.m, "latent_v": self.latent_opt.v,
                "latent_counts": self.latent_opt.counts}

    def load_optimizer_state(self, st: dict):
        self.net_opt.load_state(st["step"], st["m"], st["v"])
        self.latent_opt.m[...] = st["latent_m"]
        self.latent_opt.v[...] = st["latent_v"]
        self.latent_opt.counts[...] = st["latent_counts"]


def train_step(state: TrainState, batch: RayBatch, config: TrainConfig, rng=None, lr=None):
    """One joint update.  Returns the loss breakdown of the batch before the update."""
    model = state.model
    z = model.latents.data[batch.rows]
    breakdown, fg, bg, dz, _ = model.loss_and_grads(z, batch, config.loss_weights, rng,
                                                    need_params=True)
    for name in ("rgb", "mask", "hard", "total"):
        if not math.isfinite(getattr(breakdown, name)):
            raise TrainingError(f"non-finite loss at step {state.step}: term {name} = "
                                f"{getattr(breakdown, name)}")
    lr = lr_at(state.step, config) if lr is None else lr
    state.net_opt.update(fg + bg, lr)
    rows, inverse = np.unique(batch.rows, return_inverse=True)
    gz = np.zeros((len(rows), dz.shape[1]), dtype=np.float64)
    np.add.at(gz, inverse, dz)
    state.latent_opt.update(rows, gz.astype(dz.dtype), lr)
    state.step += 1
    return breakdown


def _config_mismatch(saved: dict, config: TrainConfig) -> list[str]:
    cur = config.to_dict()
    return sorted(k for k in cur if k not in _RESUME_FREE and saved.get(k) != cur[k])


def _checkpoint_path(out_dir: Path, step: int) -> Path:
    return out_dir / f"checkpoint_{step:07d}.ckpt"


def train(examples, config: TrainConfig, out_dir, resume=None, stop_at: int | None = None,
          progress=None) -> TrainState:
    """Train on ``examples`` and write checkpoints plus ``metrics.csv`` to ``out_dir``.

    Step ``s`` draws its batch and jitter from ``default_rng([seed, s])``, so
    a run resumed from any checkpoint continues bit-identically.  ``stop_at``
    ends the run early (after that many completed steps) without changing the
    schedule.  The final state is always saved as ``model.ckpt``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    examples = list(examples)
    if not examples:
        raise ValueError("empty dataset")
    if resume is not None:
        model, info = load_checkpoint(resume)
        saved = info.get("train_config") or {}
        bad = _config_mismatch(saved, config)
        if bad:
            raise TrainingError(f"resume config mismatch in: {', '.join(bad)}")
        if model.latents.num_rows != len(examples):
            raise TrainingError(f"checkpoint has {model.latents.num_rows} latents, dataset has "
                                f"{len(examples)} images")
        state = TrainState(model, info["step"])
        if info["optimizer"] is None:
            raise TrainingError("checkpoint has no optimizer state to resume from")
        state.load_optimizer_state(info["optimizer"])
    else:
        state = TrainState(LatentNeRF.create(config.model_config, len(examples), config.seed))

    metrics_path = out / "metrics.csv"
    rows = []
    if resume is not None and metrics_path.exists():
        with open(metrics_path, newline="") as fh:
            rows = [r for r in csv.reader(fh)][1:]
        rows = [r for r in rows if int(r[0]) <= state.step]
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        writer.writerows(rows)

    end = config.total_steps if stop_at is None else min(stop_at, config.total_steps)
    t0 = time.perf_counter()
    with open(metrics_path, "a", newline="") as fh:
        writer = csv.writer(fh)
        while state.step < end:
            s = state.step
            rng = np.random.default_rng([config.seed, s])
            batch = sample_ray_batch(state.model, examples, config, rng)
            lr = lr_at(s, config)
            b = train_step(state, batch, config, rng, lr)
            if state.step % config.log_interval == 0:
                writer.writerow([state.step, f"{lr:.9g}", f"{b.rgb:.9g}", f"{b.mask:.9g}",
                                 f"{b.hard:.9g}", f"{b.total:.9g}",
                                 f"{time.perf_counter() - t0:.3f}"])
                fh.flush()
                if progress is not None:
                    progress(state.step, b)
            if state.step % config.checkpoint_interval == 0:
                _save(state, config, _checkpoint_path(out, state.step))
    _save(state, config, out / "model.ckpt")
    return state


def _save(state: TrainState, config: TrainConfig, path):
    save_checkpoint(path, state.model, state.step, config.to_dict(), state.optimizer_state())
