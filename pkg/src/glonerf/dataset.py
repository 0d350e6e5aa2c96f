"""Single-view dataset directories: reading, writing and validation.

Layout (``k`` zero-padded to six digits)::

    images/{k}.png          8-bit RGB
    landmarks/{k}.txt       M lines "x y valid"
    masks/{k}.png           optional, 8-bit single channel
    cameras/{k}.txt         optional; fitted from landmarks when absent
    depth/{k}.bin           optional, little-endian float32, row-major H x W
    keypoints/{k}.txt       optional, M lines "X Y Z depth" (ground truth)
    canonical_keypoints.txt
    manifest.txt
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import (CameraExtrinsics, CameraFitError, CameraIntrinsics, CanonicalKeypoints,
                     LandmarkSet, fit_camera, pixel_rays)

__all__ = [
    "DatasetError",
    "TrainingExample",
    "Dataset",
    "load_dataset",
    "read_image",
    "write_image",
    "read_landmarks",
    "write_landmarks",
    "read_camera",
    "write_camera",
    "read_canonical",
    "write_canonical",
    "read_manifest",
    "write_manifest",
    "read_keypoints",
    "read_depth",
    "write_example_files",
]

log = logging.getLogger(__name__)

CAMERA_HEADER = "# glonerf camera v1"
CANONICAL_HEADER = "glonerf-keypoints 1"
MAX_SKIP_FRACTION = 0.01


class DatasetError(RuntimeError):
    pass


def _name(k: int) -> str:
    return f"{k:06d}"


def _fmt(x) -> str:
    return repr(float(x))


def write_image(path, img_u8):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(img_u8, dtype=np.uint8)).save(path, format="PNG")


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float32) / 255.0


def write_landmarks(path, points, valid):
    lines = [f"{_fmt(x)} {_fmt(y)} {int(bool(v))}" for (x, y), v in zip(points, valid)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_landmarks(path) -> LandmarkSet:
    pts, valid = [], []
    for ln in Path(path).read_text().splitlines():
        if not ln.strip():
            continue
        x, y, v = ln.split()
        if v not in ("0", "1"):
            raise ValueError(f"validity flag must be 0 or 1, got {v!r}")
        pts.append((float(x), float(y)))
        valid.append(v == "1")
    if not pts:
        raise ValueError("no landmarks")
    return LandmarkSet(np.array(pts), np.array(valid))


def write_camera(path, extr: CameraExtrinsics, intr: CameraIntrinsics):
    lines = [
        CAMERA_HEADER,
        "rotation " + " ".join(_fmt(v) for v in extr.rotation),
        "translation " + " ".join(_fmt(v) for v in extr.translation),
        f"focal {_fmt(intr.focal)}",
        f"principal {_fmt(intr.cx)} {_fmt(intr.cy)}",
        f"size {intr.width} {intr.height}",
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_camera(path):
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != CAMERA_HEADER:
        raise ValueError("missing camera header")
    kv = {}
    for ln in text[1:]:
        if ln.strip():
            key, *vals = ln.split()
            kv[key] = vals
    extr = CameraExtrinsics([float(v) for v in kv["rotation"]], [float(v) for v in kv["translation"]])
    w, h = (int(v) for v in kv["size"])
    cx, cy = (float(v) for v in kv["principal"])
    return extr, CameraIntrinsics(float(kv["focal"][0]), cx, cy, w, h)


def write_canonical(path, kp: CanonicalKeypoints):
    lines = [CANONICAL_HEADER, f"points {len(kp.points)}"]
    lines += [" ".join(_fmt(v) for v in p) for p in kp.points]
    lines += [f"pair {i} {j}" for i, j in kp.pairs]
    lines += [f"single {i}" for i in kp.singles]
    Path(path).write_text("\n".join(lines) + "\n")


def read_canonical(path) -> CanonicalKeypoints:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or lines[0].strip() != CANONICAL_HEADER:
        raise ValueError("missing canonical keypoints header")
    m = int(lines[1].split()[1])
    pts = np.array([[float(v) for v in ln.split()] for ln in lines[2:2 + m]])
    pairs, singles = [], []
    for ln in lines[2 + m:]:
        kind, *idx = ln.split()
        if kind == "pair":
            pairs.append((int(idx[0]), int(idx[1])))
        elif kind == "single":
            singles.append(int(idx[0]))
        else:
            raise ValueError(f"unknown canonical keypoint record {kind!r}")
    return CanonicalKeypoints(pts, pairs, singles)


def write_manifest(path, count, num_keypoints, width, height, seed, family=None):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    lines = [f"K {count}", f"M {num_keypoints}", f"width {width}", f"height {height}", f"seed {seed}"]
    if family:
        lines.append(f"family {family}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    out = {}
    for ln in Path(path).read_text().splitlines():
        if ln.strip():
            key, val = ln.split(maxsplit=1)
            out[key] = int(val) if val.lstrip("-").isdigit() else val
    return out


def read_keypoints(path):
    arr = np.loadtxt(path, ndmin=2)
    return arr[:, :3], arr[:, 3]


def read_depth(path, height, width):
    data = np.fromfile(path, dtype="<f4")
    if data.size != height * width:
        raise ValueError(f"depth file has {data.size} values, expected {height * width}")
    return data.reshape(height, width)


def write_example_files(root, k, image_u8, mask, depth, landmarks, valid, extr, intr,
                        keypoints=None, keypoint_depths=None):
    root = Path(root)
    name = _name(k)
    for sub in ("images", "landmarks", "masks", "cameras", "depth", "keypoints"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    write_image(root / "images" / f"{name}.png", image_u8)
    write_landmarks(root / "landmarks" / f"{name}.txt", landmarks, valid)
    if mask is not None:
        Image.fromarray((np.asarray(mask) > 0.5).astype(np.uint8) * 255, mode="L").save(
            root / "masks" / f"{name}.png", format="PNG")
    if extr is not None:
        write_camera(root / "cameras" / f"{name}.txt", extr, intr)
    if depth is not None:
        np.asarray(depth, dtype="<f4").tofile(root / "depth" / f"{name}.bin")
    if keypoints is not None:
        rows = [" ".join(_fmt(v) for v in (*p, d)) for p, d in zip(keypoints, keypoint_depths)]
        (root / "keypoints" / f"{name}.txt").write_text("\n".join(rows) + "\n")


@dataclass
class TrainingExample:
    index: int
    name: str
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    landmarks: LandmarkSet
    mask: np.ndarray | None = None
    extrinsics: CameraExtrinsics | None = None
    intrinsics: CameraIntrinsics | None = None
    camera_source: str = "file"
    depth: np.ndarray | None = None
    keypoints: np.ndarray | None = None
    keypoint_depths: np.ndarray | None = None
    _rays: tuple | None = field(default=None, repr=False)

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def rays(self):
        """``(origin, directions (H*W, 3))`` through every pixel centre, row-major."""
        if self.extrinsics is None:
            raise CameraFitError(f"example {self.name} has no resolved camera")
        if self._rays is None:
            self._rays = pixel_rays(self.extrinsics, self.intrinsics)
        return self._rays


@dataclass
class Dataset:
    examples: list
    skipped: list  # [(name, reason)]
    canonical: CanonicalKeypoints | None
    manifest: dict
    root: Path

    def __len__(self):
        return len(self.examples)

    def __getitem__(self, k):
        return self.examples[k]

    def __iter__(self):
        return iter(self.examples)


def _load_one(root: Path, stem: str, lm_dir: Path):
    image = read_image(root / "images" / f"{stem}.png")
    h, w = image.shape[:2]
    landmarks = read_landmarks(lm_dir / f"{stem}.txt")
    mask = depth = kps = kpd = extr = intr = None
    mpath = root / "masks" / f"{stem}.png"
    if mpath.exists():
        mask = read_mask(mpath)
        if mask.shape != (h, w):
            raise ValueError(f"mask shape {mask.shape} does not match image {(h, w)}")
    cpath = root / "cameras" / f"{stem}.txt"
    if cpath.exists():
        extr, intr = read_camera(cpath)
    dpath = root / "depth" / f"{stem}.bin"
    if dpath.exists():
        depth = read_depth(dpath, h, w)
    kpath = root / "keypoints" / f"{stem}.txt"
    if kpath.exists():
        kps, kpd = read_keypoints(kpath)
    lp = landmarks.points
    if np.any(lp[landmarks.valid] < 0) or np.any(lp[landmarks.valid, 0] > w) or \
            np.any(lp[landmarks.valid, 1] > h):
        raise ValueError("valid landmark outside the image")
    return TrainingExample(0, stem, image, landmarks, mask, extr, intr, "file", depth, kps, kpd)


def load_dataset(path, canonical: CanonicalKeypoints | None = None, focal_guess: float | None = None,
                 fit_intrinsics: bool | None = None) -> Dataset:
    """Read a dataset directory into examples ordered by filename.

    Unreadable items are skipped with a warning while they stay under 1% of
    the corpus; beyond that the load fails.  Examples without a camera file
    get one fitted from their landmarks against the canonical keypoints
    (focal length free when ``fit_intrinsics`` is unset and at least five
    landmarks are valid).
    """
    root = Path(path)
    img_dir = root / "images"
    if not img_dir.is_dir():
        raise DatasetError(f"{root}: missing images/ directory")
    stems = sorted(p.stem for p in img_dir.glob("*.png"))
    if not stems:
        raise DatasetError(f"{root}: no images found")
    lm_dir = root / "landmarks"
    lm_stems = sorted(p.stem for p in lm_dir.glob("*.txt")) if lm_dir.is_dir() else []
    if len(lm_stems) != len(stems):
        raise DatasetError(f"{root}: {len(stems)} images but {len(lm_stems)} landmark files")
    manifest = read_manifest(root / "manifest.txt") if (root / "manifest.txt").exists() else {}
    if canonical is None:
        for cand in (root / "canonical_keypoints.txt", root.parent / "canonical_keypoints.txt"):
            if cand.exists():
                canonical = read_canonical(cand)
                break

    examples, skipped = [], []
    for stem in stems:
        try:
            examples.append(_load_one(root, stem, lm_dir))
        except (OSError, ValueError, KeyError, IndexError) as err:
            log.warning("skipping %s: %s", stem, err)
            skipped.append((stem, str(err)))

    for ex in examples:
        if ex.extrinsics is not None:
            continue
        if canonical is None:
            raise DatasetError(f"{root}: cameras missing and no canonical_keypoints.txt to fit them")
        f0 = focal_guess or manifest.get("focal") or 1.2 * max(ex.width, ex.height)
        intr0 = CameraIntrinsics.centered(float(f0), ex.width, ex.height)
        fit_f = fit_intrinsics if fit_intrinsics is not None else ex.landmarks.num_valid >= 5
        try:
            fit = fit_camera(ex.landmarks, canonical, intr0, fit_intrinsics=fit_f)
        except (CameraFitError, ValueError) as err:
            log.warning("skipping %s: camera fit failed: %s", ex.name, err)
            skipped.append((ex.name, f"camera fit failed: {err}"))
            ex.extrinsics = None
            continue
        ex.extrinsics, ex.intrinsics, ex.camera_source = fit.extrinsics, fit.intrinsics, "fitted"

    examples = [ex for ex in examples if ex.extrinsics is not None]
    if skipped and len(skipped) >= MAX_SKIP_FRACTION * len(stems):
        detail = "; ".join(f"{n}: {r}" for n, r in skipped[:5])
        raise DatasetError(f"{root}: {len(skipped)} of {len(stems)} items unreadable ({detail})")
    for k, ex in enumerate(examples):
        ex.index = k
    return Dataset(examples, skipped, canonical, manifest, root)
