"""The desk-scale synthetic protocol: generate, train, evaluate, cache.

A run is identified by its full configuration plus a hash of the package
source, so cached results are reused only while the code that produced them
is unchanged.
"""

from __future__ import annotations

import ast
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import load_dataset
from .evaluate import FitSettings, eval_depth, eval_novel_view, eval_recon, mean_score
from .synthetic import SyntheticSceneSpec, generate_synthetic
from .train import TrainConfig, train

__all__ = ["ProtocolConfig", "source_hash", "run_protocol"]


@dataclass(frozen=True)
class ProtocolConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    count: int = 100
    data_seed: int = 0
    image_size: int = 64
    family: str = "sphere-pair"
    fit: FitSettings = field(default_factory=lambda: FitSettings(steps=300, lr=1e-2,
                                                                 pixels_per_step=32))

    def to_dict(self) -> dict:
        return asdict(self)


# modules whose code can change protocol results
_COMPUTE_MODULES = ("camera", "checkpoint", "dataset", "evaluate", "field", "latent", "losses",
                    "metrics", "model", "optim", "render", "synthetic", "train")


def _strip_docstrings(tree):
    for node in ast.walk(tree):
        body = getattr(node, "body", None)
        if isinstance(body, list) and body and isinstance(body[0], ast.Expr) and \
                isinstance(body[0].value, ast.Constant) and isinstance(body[0].value.value, str):
            node.body = body[1:] or [ast.Pass()]
    return tree


def source_hash() -> str:
    """Hash of the computational modules' syntax trees (comments and docstrings ignored)."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for name in _COMPUTE_MODULES:
        tree = _strip_docstrings(ast.parse((root / f"{name}.py").read_text()))
        h.update(name.encode())
        h.update(ast.dump(tree).encode())
    return h.hexdigest()[:16]


def _key(cfg: ProtocolConfig) -> str:
    blob = json.dumps({"config": cfg.to_dict(), "source": source_hash()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run_protocol(cfg: ProtocolConfig, work_dir, use_cache=True, progress=None) -> dict:
    """Train on a synthetic corpus and score reconstruction, novel views and depth.

    Returns a dict with ``recon_psnr``, ``novel_psnr`` and ``depth_corr``
    (means) plus per-image lists and timings.  Results are cached as JSON in
    ``work_dir``.
    """
    work = Path(work_dir)
    work.mkdir(parents=True, exist_ok=True)
    key = _key(cfg)
    cache = work / f"result-{key}.json"
    if use_cache and cache.exists():
        return json.loads(cache.read_text())

    data = work / f"data-{cfg.family}-{cfg.count}-{cfg.image_size}-{cfg.data_seed}"
    if not (data / "eval" / "manifest.txt").exists():
        generate_synthetic(data, cfg.count, cfg.data_seed,
                           SyntheticSceneSpec(family=cfg.family, image_size=cfg.image_size))
    ds = load_dataset(data)
    targets = load_dataset(data / "eval")

    t0 = time.perf_counter()
    state = train(ds.examples, cfg.train, work / f"run-{key}", progress=progress)
    t_train = time.perf_counter() - t0

    t0 = time.perf_counter()
    recon = eval_recon(state.model, ds.examples)
    depth = eval_depth(state.model, ds.examples)
    novel, _ = eval_novel_view(state.model, ds.examples, targets.examples, cfg.fit)
    t_eval = time.perf_counter() - t0

    result = {
        "key": key,
        "source": source_hash(),
        "config": cfg.to_dict(),
        "recon_psnr": mean_score(recon),
        "novel_psnr": mean_score(novel),
        "depth_corr": mean_score(depth),
        "depth_valid_images": int(np.sum(np.isfinite([s.value for s in depth]))),
        "per_image": {
            "recon_psnr": [s.value for s in recon],
            "novel_psnr": [s.value for s in novel],
            "depth_corr": [None if not np.isfinite(s.value) else s.value for s in depth],
        },
        "train_seconds": t_train,
        "eval_seconds": t_eval,
    }
    cache.write_text(json.dumps(result, indent=1, sort_keys=True))
    return result
