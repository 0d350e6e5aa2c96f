"""Analytic synthetic corpora: Lambertian sphere/box composites with exact ground truth.

Every object shares a body sphere of fixed radius at the origin.  The six
keypoints sit on that sphere, mirrored across x = 0, so the canonical
keypoint set is exact for every object and camera fitting from the emitted
landmarks recovers the emitted cameras.  World axes follow the camera
convention (+y down); objects face -z, towards the frontal camera.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import (CameraExtrinsics, CameraIntrinsics, CanonicalKeypoints, orbit_extrinsics,
                     pixel_rays, project_points)

__all__ = [
    "Sphere",
    "Box",
    "SceneObject",
    "SyntheticSceneSpec",
    "SyntheticView",
    "BODY_RADIUS",
    "canonical_keypoints",
    "sample_object",
    "sample_camera",
    "trace",
    "render_view",
    "generate_synthetic",
]

BODY_RADIUS = 0.55

_KEYPOINT_DIRS = np.array([
    [0.35, -0.2, -0.9],
    [-0.35, -0.2, -0.9],
    [0.7, 0.15, -0.7],
    [-0.7, 0.15, -0.7],
    [0.0, -0.6, -0.8],
    [0.0, 0.65, -0.75],
])


def canonical_keypoints() -> CanonicalKeypoints:
    dirs = _KEYPOINT_DIRS / np.linalg.norm(_KEYPOINT_DIRS, axis=1, keepdims=True)
    pts = BODY_RADIUS * dirs
    pts[1] = pts[0] * (-1, 1, 1)
    pts[3] = pts[2] * (-1, 1, 1)
    return CanonicalKeypoints(pts, pairs=[(0, 1), (2, 3)], singles=[4, 5])


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray

    def intersect(self, o, d):
        oc = o - self.center
        b = (d * oc).sum(-1)
        c = (oc * oc).sum(-1) - self.radius**2
        disc = b * b - c
        hit = disc >= 0
        root = np.sqrt(np.where(hit, disc, 0))
        t = -b - root
        t = np.where(t > 1e-9, t, -b + root)
        t = np.where(hit & (t > 1e-9), t, np.inf)
        return t

    def normal(self, p):
        n = p - self.center
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def sdf(self, p):
        return np.linalg.norm(p - self.center, axis=-1) - self.radius


@dataclass
class Box:
    center: np.ndarray
    half: np.ndarray
    albedo: np.ndarray

    def intersect(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (self.center - self.half - o) * inv
            t2 = (self.center + self.half - o) * inv
        tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
        t = np.where(tmin > 1e-9, tmin, tmax)
        return np.where((tmax >= tmin) & (t > 1e-9), t, np.inf)

    def normal(self, p):
        q = (p - self.center) / self.half
        axis = np.argmax(np.abs(q), axis=-1)
        n = np.zeros_like(p)
        np.put_along_axis(n, axis[..., None], np.take_along_axis(np.sign(q), axis[..., None], -1), -1)
        return n

    def sdf(self, p):
        q = np.abs(p - self.center) - self.half
        outside = np.linalg.norm(np.maximum(q, 0), axis=-1)
        return outside + np.minimum(q.max(axis=-1), 0)


@dataclass
class SceneObject:
    parts: list
    background_top: np.ndarray
    background_bottom: np.ndarray

    def sdf(self, p):
        return np.min([part.sdf(p) for part in self.parts], axis=0)

    def background(self, d):
        s = np.clip(0.5 + d[..., 1:2], 0, 1)
        return (1 - s) * self.background_top + s * self.background_bottom


@dataclass
class SyntheticSceneSpec:
    family: str = "sphere-pair"  # or "box-and-sphere"
    image_size: int = 64
    yaw_range: tuple = (-35.0, 35.0)  # degrees
    pitch_range: tuple = (-15.0, 15.0)
    distance_range: tuple = (2.6, 3.4)
    focal_range: tuple = (70.0, 80.0)  # pixels at 64 px; scaled with image_size
    light_direction: tuple = (-0.3, -0.5, -0.8)  # towards the light
    ambient: float = 0.35
    albedo_range: tuple = (0.25, 0.95)
    background_range: tuple = (0.1, 0.9)

    def __post_init__(self):
        if self.family not in ("sphere-pair", "box-and-sphere"):
            raise ValueError(f"unknown object family {self.family!r}")

    @property
    def light(self):
        l = np.asarray(self.light_direction, dtype=np.float64)
        return l / np.linalg.norm(l)


def _color(rng, lo_hi):
    return rng.uniform(*lo_hi, size=3)


def sample_object(spec: SyntheticSceneSpec, rng) -> SceneObject:
    """Body sphere plus a family-specific symmetric attachment and a nose."""
    body = Sphere(np.zeros(3), BODY_RADIUS, _color(rng, spec.albedo_range))
    parts = [body]
    if spec.family == "sphere-pair":
        r = rng.uniform(0.15, 0.28)
        a = rng.uniform(0.35, 0.5)
        b = rng.uniform(-0.45, -0.25)
        c = rng.uniform(0.0, 0.2)
        scale = min(1.0, 0.95 / (math.sqrt(a * a + b * b + c * c) + r))
        alb = _color(rng, spec.albedo_range)
        parts += [Sphere(np.array([a, b, c]) * scale, r * scale, alb),
                  Sphere(np.array([-a, b, c]) * scale, r * scale, alb)]
    else:
        hx = rng.uniform(0.25, 0.45)
        hy = rng.uniform(0.06, 0.12)
        hz = rng.uniform(0.25, 0.4)
        cy = rng.uniform(0.5, 0.6)
        parts.append(Box(np.array([0.0, cy, 0.05]), np.array([hx, hy, hz]), _color(rng, spec.albedo_range)))
    nose_r = rng.uniform(0.08, 0.14)
    parts.append(Sphere(np.array([0.0, rng.uniform(0.0, 0.1), -BODY_RADIUS + 0.03]), nose_r,
                        _color(rng, spec.albedo_range)))
    return SceneObject(parts, _color(rng, spec.background_range), _color(rng, spec.background_range))


def sample_camera(spec: SyntheticSceneSpec, rng):
    yaw = rng.uniform(*spec.yaw_range)
    pitch = rng.uniform(*spec.pitch_range)
    dist = rng.uniform(*spec.distance_range)
    focal = rng.uniform(*spec.focal_range) * spec.image_size / 64.0
    intr = CameraIntrinsics.centered(focal, spec.image_size, spec.image_size)
    return orbit_extrinsics(yaw, pitch, dist), intr


def trace(obj: SceneObject, origin, dirs):
    """First hit of each ray.  Returns ``(t, part_index)``; misses give ``inf`` / -1."""
    o = np.broadcast_to(origin, dirs.shape)
    ts = np.stack([p.intersect(o, dirs) for p in obj.parts], axis=0)
    idx = np.argmin(ts, axis=0)
    t = np.take_along_axis(ts, idx[None], 0)[0]
    return t, np.where(np.isfinite(t), idx, -1)


def shade(obj: SceneObject, spec: SyntheticSceneSpec, origin, dirs):
    """Colour, mask and depth (ray parameter) of every ray."""
    t, idx = trace(obj, origin, dirs)
    hit = idx >= 0
    color = obj.background(dirs)
    light = spec.light
    for k, part in enumerate(obj.parts):
        sel = idx == k
        if not sel.any():
            continue
        p = origin + t[sel, None] * dirs[sel]
        lam = np.clip(part.normal(p) @ light, 0, None)
        color[sel] = part.albedo * (spec.ambient + (1 - spec.ambient) * lam[:, None])
    return np.clip(color, 0, 1), hit, t


@dataclass
class SyntheticView:
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    mask: np.ndarray  # (H, W) bool
    depth: np.ndarray  # (H, W), inf off the object
    extrinsics: CameraExtrinsics
    intrinsics: CameraIntrinsics
    landmarks: np.ndarray  # (M, 2)
    valid: np.ndarray  # (M,) bool
    keypoints: np.ndarray  # (M, 3) world
    keypoint_depths: np.ndarray  # (M,) distance from the camera centre
    extras: dict = field(default_factory=dict)


def render_view(obj: SceneObject, spec: SyntheticSceneSpec, extr, intr, keypoints) -> SyntheticView:
    origin, dirs = pixel_rays(extr, intr)
    color, hit, t = shade(obj, spec, origin, dirs)
    h, w = intr.height, intr.width
    kp = keypoints.points
    uv = project_points(kp, extr, intr)
    to_kp = kp - origin
    kp_depth = np.linalg.norm(to_kp, axis=1)
    t_kp, _ = trace(obj, origin, to_kp / kp_depth[:, None])
    visible = np.abs(t_kp - kp_depth) < 1e-6
    inside = (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)
    return SyntheticView(color.reshape(h, w, 3), hit.reshape(h, w), t.reshape(h, w), extr, intr, uv,
                         visible & inside, kp.copy(), kp_depth)


def _quantize(img):
    return np.floor(np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8)


def generate_synthetic(out_dir, count: int, seed: int = 0, spec: SyntheticSceneSpec | None = None,
                       eval_split: bool = True) -> Path:
    """Write a corpus of ``count`` single-view objects (and a paired eval split).

    Each object is drawn from its own seed stream, so a given ``(spec, seed)``
    always produces the same bytes.  The eval split under ``eval/`` renders
    the same objects from a second, independent camera.
    """
    from .dataset import write_example_files, write_canonical, write_manifest

    if count < 1:
        raise ValueError("count must be >= 1")
    spec = spec or SyntheticSceneSpec()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    keypoints = canonical_keypoints()
    write_canonical(out / "canonical_keypoints.txt", keypoints)
    streams = np.random.SeedSequence(seed).spawn(count)
    splits = [(out, 0)] + ([(out / "eval", 1)] if eval_split else [])
    for split_dir, _ in splits:
        write_manifest(split_dir / "manifest.txt", count, len(keypoints.points), spec.image_size,
                       spec.image_size, seed, spec.family)
    for k, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        obj = sample_object(spec, rng)
        cams = [sample_camera(spec, rng) for _ in splits]
        for (split_dir, _), (extr, intr) in zip(splits, cams):
            view = render_view(obj, spec, extr, intr, keypoints)
            write_example_files(split_dir, k, _quantize(view.image), view.mask, view.depth,
                                view.landmarks, view.valid, extr, intr, view.keypoints,
                                view.keypoint_depths)
    return out
