"""Binary checkpoint and latent files.

Checkpoint layout (all integers little-endian)::

    8 bytes   magic b"GNRFCKPT"
    u32       format version
    u32       header length n
    n bytes   UTF-8 JSON header
    ...       raw array blocks, in header["blocks"] order

The header records the model configuration (which fixes every encoding and
layer shape), the training configuration and step, and for each block its
name, dtype and shape.  Blocks are field-network weights and biases in layer
order, then the background network, then the latent table, then optional
optimizer moments.  Floats are stored exactly as held in memory, so a round
trip is bit-identical.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .field import MLP, BackgroundModel, EncodingConfig, FieldModel
from .latent import LatentTable
from .model import LatentNeRF, ModelConfig

__all__ = [
    "CheckpointError",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
    "save_checkpoint",
    "load_checkpoint",
    "save_latent",
    "load_latent",
]

CHECKPOINT_MAGIC = b"GNRFCKPT"
CHECKPOINT_VERSION = 1
LATENT_MAGIC = b"GNRFLATN"
LATENT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _le(dtype) -> np.dtype:
    return np.dtype(dtype).newbyteorder("<")


def _mlp_blocks(prefix, mlp: MLP):
    out = []
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        out += [(f"{prefix}.{i}.weight", w), (f"{prefix}.{i}.bias", b)]
    return out


def _atomic_write(path: Path, chunks):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)


def save_checkpoint(path, model: LatentNeRF, step: int = 0, train_config: dict | None = None,
                    optimizer: dict | None = None, extra: dict | None = None):
    """Write ``model`` (and optionally optimizer state) to ``path``.

    ``optimizer`` is ``{"step": int, "m": [...], "v": [...], "latent_m": arr,
    "latent_v": arr, "latent_counts": arr}`` as produced by the trainer.
    """
    blocks = _mlp_blocks("field", model.field.mlp) + _mlp_blocks("background", model.background.mlp)
    blocks.append(("latents", model.latents.data))
    opt_meta = None
    if optimizer is not None:
        opt_meta = {"step": int(optimizer["step"])}
        for i, (m, v) in enumerate(zip(optimizer["m"], optimizer["v"])):
            blocks += [(f"adam.m.{i}", m), (f"adam.v.{i}", v)]
        blocks += [("latent_adam.m", optimizer["latent_m"]), ("latent_adam.v", optimizer["latent_v"]),
                   ("latent_adam.counts", optimizer["latent_counts"])]
    header = {
        "model_config": model.config.to_dict(),
        "train_config": train_config,
        "step": int(step),
        "optimizer": opt_meta,
        "extra": extra or {},
        "blocks": [{"name": n, "dtype": _le(a.dtype).str, "shape": list(a.shape)} for n, a in blocks],
    }
    hdr = json.dumps(header, sort_keys=True).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(hdr)), hdr]
    chunks += [np.ascontiguousarray(a, dtype=_le(a.dtype)).tobytes() for _, a in blocks]
    _atomic_write(path, chunks)


def _read_header(fh, magic, what):
    if fh.read(len(magic)) != magic:
        raise CheckpointError(f"not a {what} file (bad magic)")
    raw = fh.read(8)
    if len(raw) != 8:
        raise CheckpointError(f"truncated {what} header")
    return struct.unpack("<II", raw)


def load_checkpoint(path):
    """Returns ``(model, info)`` where ``info`` has step, train_config, optimizer, extra."""
    with open(path, "rb") as fh:
        version, n = _read_header(fh, CHECKPOINT_MAGIC, "checkpoint")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        try:
            header = json.loads(fh.read(n).decode())
        except ValueError as err:
            raise CheckpointError(f"corrupt checkpoint header: {err}") from err
        arrays = {}
        for spec in header["blocks"]:
            dt = np.dtype(spec["dtype"])
            count = int(np.prod(spec["shape"], dtype=np.int64))
            buf = fh.read(count * dt.itemsize)
            if len(buf) != count * dt.itemsize:
                raise CheckpointError(f"truncated checkpoint at block {spec['name']}")
            arrays[spec["name"]] = np.frombuffer(buf, dtype=dt).reshape(spec["shape"]).astype(
                dt.newbyteorder("="))
        if fh.read(1):
            raise CheckpointError("trailing bytes after last block")

    cfg = ModelConfig.from_dict(header["model_config"])

    def mlp(prefix, input_dims, skip):
        ws, bs, i = [], [], 0
        while f"{prefix}.{i}.weight" in arrays:
            ws.append(arrays[f"{prefix}.{i}.weight"])
            bs.append(arrays[f"{prefix}.{i}.bias"])
            i += 1
        return MLP(ws, bs, input_dims, skip)

    enc = EncodingConfig(cfg.num_bands)
    bg_enc = EncodingConfig(cfg.bg_bands)
    field = FieldModel(mlp("field", (enc.dim, cfg.latent_dim), cfg.skip), enc, cfg.latent_dim)
    background = BackgroundModel(mlp("background", (bg_enc.dim, cfg.latent_dim), None), bg_enc,
                                 cfg.latent_dim)
    model = LatentNeRF(cfg, field, background, LatentTable.from_array(arrays["latents"]))
    optimizer = None
    if header.get("optimizer") is not None:
        k = len(model.parameters())
        optimizer = {
            "step": header["optimizer"]["step"],
            "m": [arrays[f"adam.m.{i}"] for i in range(k)],
            "v": [arrays[f"adam.v.{i}"] for i in range(k)],
            "latent_m": arrays["latent_adam.m"],
            "latent_v": arrays["latent_adam.v"],
            "latent_counts": arrays["latent_adam.counts"],
        }
    info = {"step": header["step"], "train_config": header.get("train_config"),
            "optimizer": optimizer, "extra": header.get("extra", {})}
    return model, info


def save_latent(path, z):
    """Standalone latent: magic, u32 version, u32 dimension, then float32 values."""
    z = np.asarray(z, dtype="<f4").ravel()
    _atomic_write(path, [LATENT_MAGIC, struct.pack("<II", LATENT_VERSION, z.size), z.tobytes()])


def load_latent(path) -> np.ndarray:
    with open(path, "rb") as fh:
        version, d = _read_header(fh, LATENT_MAGIC, "latent")
        if version != LATENT_VERSION:
            raise CheckpointError(f"unsupported latent file version {version}")
        buf = fh.read()
    if len(buf) != 4 * d:
        raise CheckpointError(f"latent file holds {len(buf)} bytes, expected {4 * d}")
    return np.frombuffer(buf, dtype="<f4").astype(np.float32)
