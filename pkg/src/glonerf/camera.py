"""Camera recovery from 2D landmarks by Levenberg-Marquardt shape matching.

Conventions: world points map to the camera frame as ``Xc = R q + t`` with
``R`` given as an axis-angle vector; the camera looks down +z with +x right
and +y down, so pixels are ``u = f X/Z + cx``, ``v = f Y/Z + cy``.  The
canonical frontal camera is ``R = I, t = (0, 0, d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

__all__ = [
    "CameraIntrinsics",
    "CameraExtrinsics",
    "LandmarkSet",
    "CanonicalKeypoints",
    "ProjectionError",
    "CameraFitError",
    "DegenerateLandmarksError",
    "LMError",
    "LMConfig",
    "LMResult",
    "CameraFit",
    "CanonicalFit",
    "rotvec_to_matrix",
    "rotation_jacobian",
    "project",
    "project_points",
    "reprojection_residual",
    "lm_solve",
    "fit_camera",
    "fit_canonical_points",
    "similarity_align",
    "rotation_angle_between",
    "orbit_extrinsics",
    "pixel_rays",
]


class ProjectionError(ValueError):
    """A point lies on or behind the camera plane."""


class CameraFitError(RuntimeError):
    pass


class DegenerateLandmarksError(CameraFitError):
    pass


class LMError(RuntimeError):
    pass


@dataclass
class CameraIntrinsics:
    focal: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError(f"focal length must be positive, got {self.focal}")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def centered(cls, focal, width, height):
        return cls(float(focal), width / 2.0, height / 2.0, int(width), int(height))


@dataclass
class CameraExtrinsics:
    rotation: np.ndarray  # axis-angle
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @property
    def matrix(self) -> np.ndarray:
        return rotvec_to_matrix(self.rotation)

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.matrix.T @ self.translation


@dataclass
class LandmarkSet:
    points: np.ndarray  # (M, 2) pixels
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.valid is None:
            self.valid = np.ones(len(self.points), dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool).reshape(-1)
        if self.valid.shape[0] != self.points.shape[0]:
            raise ValueError("one validity flag per landmark required")

    @property
    def num_valid(self) -> int:
        return int(self.valid.sum())


@dataclass
class CanonicalKeypoints:
    """3D keypoints mirrored across the x = 0 plane.

    ``pairs`` lists ``(i, j)`` with ``points[j] = (-x, y, z)`` of
    ``points[i]``; ``singles`` lie on the plane.  The free parameters are
    ``(x, y, z)`` per pair and ``(y, z)`` per single, so symmetry is exact.
    """

    points: np.ndarray
    pairs: list = field(default_factory=list)
    singles: list = field(default_factory=list)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.pairs = [tuple(int(i) for i in p) for p in self.pairs]
        self.singles = [int(i) for i in self.singles]
        covered = sorted([i for p in self.pairs for i in p] + self.singles)
        if self.pairs or self.singles:
            if covered != list(range(len(self.points))):
                raise ValueError("symmetry pairing must cover every keypoint exactly once")

    @classmethod
    def from_params(cls, params, pairs, singles, num_points):
        pts = np.zeros((num_points, 3))
        k = 0
        for i, j in pairs:
            x, y, z = params[k:k + 3]
            pts[i] = (x, y, z)
            pts[j] = (-x, y, z)
            k += 3
        for i in singles:
            pts[i] = (0.0, params[k], params[k + 1])
            k += 2
        return cls(pts, pairs, singles)

    def params(self) -> np.ndarray:
        """Symmetric projection of ``points`` onto the free parameters."""
        out = []
        for i, j in self.pairs:
            a, b = self.points[i], self.points[j]
            out += [(a[0] - b[0]) / 2, (a[1] + b[1]) / 2, (a[2] + b[2]) / 2]
        for i in self.singles:
            out += [self.points[i, 1], self.points[i, 2]]
        return np.asarray(out, dtype=np.float64)

    def param_jacobian(self) -> np.ndarray:
        """``d points.ravel() / d params`` (constant)."""
        m = len(self.points)
        jac = np.zeros((3 * m, 3 * len(self.pairs) + 2 * len(self.singles)))
        k = 0
        for i, j in self.pairs:
            for c in range(3):
                jac[3 * i + c, k + c] = 1.0
                jac[3 * j + c, k + c] = -1.0 if c == 0 else 1.0
            k += 3
        for i in self.singles:
            jac[3 * i + 1, k] = 1.0
            jac[3 * i + 2, k + 1] = 1.0
            k += 2
        return jac

    def is_symmetric(self) -> bool:
        ok = all(np.array_equal(self.points[j], self.points[i] * (-1, 1, 1)) for i, j in self.pairs)
        return ok and all(self.points[i, 0] == 0 for i in self.singles)


def _skew(v):
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]], dtype=np.float64)


def rotvec_to_matrix(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta = math.sqrt(float(w @ w))
    k = _skew(w)
    if theta < 1e-8:
        return np.eye(3) + k + 0.5 * k @ k
    return np.eye(3) + (math.sin(theta) / theta) * k + ((1 - math.cos(theta)) / theta**2) * k @ k


def rotation_jacobian(w, v) -> np.ndarray:
    """``d (R(w) v) / d w`` for an axis-angle vector ``w`` (3x3)."""
    w = np.asarray(w, dtype=np.float64)
    theta2 = float(w @ w)
    if theta2 < 1e-16:
        return -_skew(v)
    r = rotvec_to_matrix(w)
    return -r @ _skew(v) @ (np.outer(w, w) + (r.T - np.eye(3)) @ _skew(w)) / theta2


def _to_camera(q, extr: CameraExtrinsics):
    return np.atleast_2d(q) @ extr.matrix.T + extr.translation


def project_points(q, extr: CameraExtrinsics, intr: CameraIntrinsics, eps=1e-9) -> np.ndarray:
    """Pinhole projection of ``(M, 3)`` world points to ``(M, 2)`` pixels."""
    xc = _to_camera(q, extr)
    if np.any(xc[:, 2] <= eps):
        raise ProjectionError("point at or behind the camera plane")
    return intr.focal * xc[:, :2] / xc[:, 2:3] + np.array([intr.cx, intr.cy])


def project(q, extr: CameraExtrinsics, intr: CameraIntrinsics, eps=1e-9) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    uv = project_points(q, extr, intr, eps)
    return uv[0] if q.ndim == 1 else uv


def reprojection_residual(landmarks: LandmarkSet, q, extr, intr) -> np.ndarray:
    """Stacked ``landmark - projection``; invalid landmarks contribute zeros."""
    q = np.asarray(q, dtype=np.float64)
    res = np.zeros_like(landmarks.points)
    v = landmarks.valid
    if v.any():
        res[v] = landmarks.points[v] - project_points(q[v], extr, intr)
    return res.ravel()


@dataclass
class LMConfig:
    max_iters: int = 100
    lambda_init: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    tol: float = 1e-10
    lambda_max: float = 1e16


@dataclass
class LMResult:
    x: np.ndarray
    cost: float
    status: str  # "converged" | "max_iters" | "stalled"
    iterations: int
    cost_history: list


def _forward_jacobian(fun, x, r, h=1e-7):
    jac = np.empty((r.size, x.size))
    for i in range(x.size):
        step = h * max(1.0, abs(x[i]))
        xp = x.copy()
        xp[i] += step
        jac[:, i] = (fun(xp) - r) / step
    return jac


def lm_solve(fun: Callable, x0, jac: Callable | None = None, config: LMConfig | None = None) -> LMResult:
    """Minimise ``||fun(x)||^2`` with Marquardt-scaled damping.

    ``jac`` defaults to forward differences.  Trial points whose residuals are
    not finite are treated as rejected steps; a non-finite residual at ``x0``
    raises :class:`LMError`.  ``cost`` is the plain sum of squared residuals.
    """
    cfg = config or LMConfig()
    x = np.array(x0, dtype=np.float64)
    r = np.asarray(fun(x), dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise LMError("non-finite residuals at the initial point")
    cost = float(r @ r)
    history = [cost]
    lam = cfg.lambda_init
    if cost == 0.0:
        return LMResult(x, cost, "converged", 0, history)
    status = "max_iters"
    it = 0
    while it < cfg.max_iters:
        j = jac(x) if jac is not None else _forward_jacobian(fun, x, r)
        g = j.T @ r
        if np.max(np.abs(g)) < cfg.tol:
            status = "converged"
            break
        a = j.T @ j
        diag = np.maximum(np.diag(a), 1e-12 * max(1.0, float(np.max(np.diag(a)))))
        accepted = False
        solved_any = False
        while lam <= cfg.lambda_max:
            try:
                step = np.linalg.solve(a + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= cfg.lambda_up
                continue
            solved_any = True
            if np.linalg.norm(step) < cfg.tol * (np.linalg.norm(x) + cfg.tol):
                status = "converged"
                break
            with np.errstate(all="ignore"):
                r_new = np.asarray(fun(x + step), dtype=np.float64)
            new_cost = float(r_new @ r_new) if np.all(np.isfinite(r_new)) else math.inf
            if new_cost < cost:
                x, r, cost = x + step, r_new, new_cost
                lam = max(lam / cfg.lambda_down, 1e-15)
                accepted = True
                break
            lam *= cfg.lambda_up
        if not accepted:
            if not solved_any:
                raise LMError("augmented normal equations stayed singular after damping retries")
            if status != "converged":
                status = "stalled"
            break
        it += 1
        history.append(cost)
        if cost == 0.0:
            status = "converged"
            break
    return LMResult(x, cost, status, it, history)


class CameraFit(NamedTuple):
    extrinsics: CameraExtrinsics
    intrinsics: CameraIntrinsics
    rms: float


def _pose_residual_and_jac(landmarks: LandmarkSet, q, intr: CameraIntrinsics, fit_focal: bool):
    v = landmarks.valid
    q_v = q[v]
    obs = landmarks.points[v]
    n_valid = int(v.sum())

    def unpack(p):
        f = p[6] if fit_focal else intr.focal
        return p[:3], p[3:6], f

    def residual(p):
        w, t, f = unpack(p)
        xc = q_v @ rotvec_to_matrix(w).T + t
        if np.any(xc[:, 2] <= 1e-9) or f <= 0:
            return np.full(2 * n_valid, np.nan)
        uv = f * xc[:, :2] / xc[:, 2:3] + np.array([intr.cx, intr.cy])
        return (obs - uv).ravel()

    def jacobian(p):
        w, t, f = unpack(p)
        xc = q_v @ rotvec_to_matrix(w).T + t
        jac = np.zeros((2 * n_valid, 7 if fit_focal else 6))
        for i, (pt, (x, y, z)) in enumerate(zip(q_v, xc)):
            dpi = np.array([[f / z, 0, -f * x / z**2], [0, f / z, -f * y / z**2]])
            jac[2 * i:2 * i + 2, :3] = -dpi @ rotation_jacobian(w, pt)
            jac[2 * i:2 * i + 2, 3:6] = -dpi
            if fit_focal:
                jac[2 * i:2 * i + 2, 6] = -np.array([x / z, y / z])
        return jac

    return residual, jacobian


def _check_landmarks(landmarks: LandmarkSet, fit_focal: bool):
    need = 5 if fit_focal else 4
    if landmarks.num_valid < need:
        raise CameraFitError(f"need at least {need} valid landmarks, got {landmarks.num_valid}")
    pts = landmarks.points[landmarks.valid]
    s = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
    if s[0] == 0 or s[1] < 1e-6 * s[0]:
        raise DegenerateLandmarksError("landmarks are collinear; pose is unobservable")


def _initial_guess(landmarks: LandmarkSet, q, intr: CameraIntrinsics, yaw: float):
    v = landmarks.valid
    w = np.array([0.0, yaw, 0.0])
    rq = q[v] @ rotvec_to_matrix(w).T
    obs = landmarks.points[v]
    spread_3d = np.sqrt(((rq[:, :2] - rq[:, :2].mean(0)) ** 2).sum(1).mean())
    spread_2d = np.sqrt(((obs - obs.mean(0)) ** 2).sum(1).mean())
    tz = intr.focal * spread_3d / max(spread_2d, 1e-9)
    off = (obs.mean(0) - (intr.cx, intr.cy)) * tz / intr.focal - rq[:, :2].mean(0)
    t = np.array([off[0], off[1], tz - rq[:, 2].mean()])
    return np.concatenate([w, t])


def fit_camera(landmarks: LandmarkSet, canonical, intrinsics: CameraIntrinsics,
               fit_intrinsics: bool = False, init: CameraExtrinsics | None = None,
               config: LMConfig | None = None) -> CameraFit:
    """Fit the camera whose projection of ``canonical`` best matches ``landmarks``.

    Without ``init`` the solver is started from four frontal-distance yaw
    hypotheses (0, +-45 and 180 degrees) and the lowest-cost solution wins.
    Only the focal length is free when ``fit_intrinsics`` is set.
    """
    q = canonical.points if isinstance(canonical, CanonicalKeypoints) else np.asarray(canonical, float)
    if q.shape != (len(landmarks.points), 3):
        raise ValueError("canonical keypoints and landmarks must align by index")
    _check_landmarks(landmarks, fit_intrinsics)
    residual, jacobian = _pose_residual_and_jac(landmarks, q, intrinsics, fit_intrinsics)
    cfg = config or LMConfig()
    if init is not None:
        starts = [np.concatenate([init.rotation, init.translation])]
    else:
        starts = [_initial_guess(landmarks, q, intrinsics, math.radians(a)) for a in (0, 45, -45, 180)]
    best = None
    for p0 in starts:
        if fit_intrinsics:
            p0 = np.append(p0, intrinsics.focal)
        try:
            res = lm_solve(residual, p0, jacobian, cfg)
        except LMError:
            continue
        if best is None or res.cost < best.cost:
            best = res
    if best is None:
        raise CameraFitError("Levenberg-Marquardt failed from every initial pose")
    p = best.x
    extr = CameraExtrinsics(p[:3], p[3:6])
    intr = intrinsics
    if fit_intrinsics:
        intr = CameraIntrinsics(float(p[6]), intrinsics.cx, intrinsics.cy, intrinsics.width,
                                intrinsics.height)
    rms = math.sqrt(best.cost / landmarks.num_valid)
    return CameraFit(extr, intr, rms)


@dataclass
class CanonicalFit:
    keypoints: CanonicalKeypoints
    cameras: list  # [(CameraExtrinsics, CameraIntrinsics)]
    cost: float
    status: str
    cost_history: list


def fit_canonical_points(corpus: Sequence[LandmarkSet], init: CanonicalKeypoints,
                         intrinsics, fit_intrinsics: bool = False, rounds: int = 20,
                         config: LMConfig | None = None) -> CanonicalFit:
    """Jointly fit symmetric canonical keypoints and one camera per image.

    Cameras are first fitted independently against the starting keypoints;
    then rounds of joint LM refine all poses and the shared keypoint
    parameters together.  Shallow keypoint sets admit a depth-reversed local
    minimum, so the joint fit is also started from copies of ``init`` with
    the depth relief flattened and mirrored, and the lowest cost wins.  The
    gauge is fixed afterwards: zero keypoint centroid, unit mean keypoint
    norm (the mirror plane is pinned to x = 0 by the parameterisation).
    """
    if len(corpus) < 3:
        raise ValueError(f"need at least 3 images to fit canonical keypoints, got {len(corpus)}")
    starts = [init]
    mid = init.points[:, 2].mean()
    for relief in (0.0, -1.0):
        pts = init.points.copy()
        pts[:, 2] = mid + relief * (pts[:, 2] - mid)
        starts.append(CanonicalKeypoints(pts, init.pairs, init.singles))
    best, failure = None, None
    for start in starts:
        try:
            fit = _fit_canonical_once(corpus, start, intrinsics, fit_intrinsics, rounds, config)
        except (LMError, CameraFitError) as err:
            failure = err
            continue
        if best is None or fit.cost < best.cost:
            best = fit
    if best is None:
        raise failure
    return best


def _fit_canonical_once(corpus, init, intrinsics, fit_intrinsics, rounds, config) -> CanonicalFit:
    m = len(init.points)
    if not init.pairs and not init.singles:
        raise ValueError("canonical keypoints need a symmetry pairing")
    intr_list = list(intrinsics) if isinstance(intrinsics, (list, tuple)) else [intrinsics] * len(corpus)
    theta = init.params()
    nq = theta.size
    dq = init.param_jacobian()
    q0 = CanonicalKeypoints.from_params(theta, init.pairs, init.singles, m).points
    npose = 7 if fit_intrinsics else 6

    poses = []
    for lm, intr in zip(corpus, intr_list):
        fit = fit_camera(lm, q0, intr, fit_intrinsics, config=config)
        p = np.concatenate([fit.extrinsics.rotation, fit.extrinsics.translation])
        poses.append(np.append(p, fit.intrinsics.focal) if fit_intrinsics else p)
    x = np.concatenate([theta] + poses)

    valids = [lm.valid for lm in corpus]
    n_res = [2 * int(v.sum()) for v in valids]
    offsets = np.concatenate([[0], np.cumsum(n_res)])

    def split(xv):
        q = CanonicalKeypoints.from_params(xv[:nq], init.pairs, init.singles, m).points
        return q, [xv[nq + k * npose: nq + (k + 1) * npose] for k in range(len(corpus))]

    def residual(xv):
        q, ps = split(xv)
        out = np.empty(offsets[-1])
        for k, (lm, intr, p) in enumerate(zip(corpus, intr_list, ps)):
            f = p[6] if fit_intrinsics else intr.focal
            xc = q[valids[k]] @ rotvec_to_matrix(p[:3]).T + p[3:6]
            if np.any(xc[:, 2] <= 1e-9) or f <= 0:
                return np.full(offsets[-1], np.nan)
            uv = f * xc[:, :2] / xc[:, 2:3] + np.array([intr.cx, intr.cy])
            out[offsets[k]:offsets[k + 1]] = (lm.points[valids[k]] - uv).ravel()
        return out

    def jacobian(xv):
        q, ps = split(xv)
        jac = np.zeros((offsets[-1], xv.size))
        for k, (intr, p) in enumerate(zip(intr_list, ps)):
            f = p[6] if fit_intrinsics else intr.focal
            rot = rotvec_to_matrix(p[:3])
            col = nq + k * npose
            row = offsets[k]
            for i in np.flatnonzero(valids[k]):
                x_, y_, z_ = rot @ q[i] + p[3:6]
                dpi = np.array([[f / z_, 0, -f * x_ / z_**2], [0, f / z_, -f * y_ / z_**2]])
                jac[row:row + 2, col:col + 3] = -dpi @ rotation_jacobian(p[:3], q[i])
                jac[row:row + 2, col + 3:col + 6] = -dpi
                if fit_intrinsics:
                    jac[row:row + 2, col + 6] = -np.array([x_ / z_, y_ / z_])
                jac[row:row + 2, :nq] = -dpi @ rot @ dq[3 * i:3 * i + 3]
                row += 2
        return jac

    r0 = residual(x)
    history = [float(r0 @ r0)]
    status = "max_iters"
    for _ in range(rounds):
        res = lm_solve(residual, x, jacobian, config)
        if not res.cost <= history[-1] * (1 + 1e-12):
            raise LMError("joint keypoint fit diverged")
        improved = history[-1] - res.cost
        x = res.x
        history.append(res.cost)
        if res.status == "converged" or improved <= 1e-12 * max(history[-2], 1e-30):
            status = "converged"
            break

    q, ps = split(x)
    centroid = q.mean(axis=0)
    centroid[0] = 0.0
    q = q - centroid
    scale = np.linalg.norm(q, axis=1).mean()
    q = q / scale
    cams = []
    for intr, p in zip(intr_list, ps):
        rot = rotvec_to_matrix(p[:3])
        t = (p[3:6] + rot @ centroid) / scale
        extr = CameraExtrinsics(p[:3].copy(), t)
        if fit_intrinsics:
            intr = CameraIntrinsics(float(p[6]), intr.cx, intr.cy, intr.width, intr.height)
        cams.append((extr, intr))
    keypoints = CanonicalKeypoints(q, init.pairs, init.singles)
    # re-derive from params so the mirror symmetry is bit-exact after rescaling
    keypoints = CanonicalKeypoints.from_params(keypoints.params(), init.pairs, init.singles, m)
    return CanonicalFit(keypoints, cams, history[-1], status, history)


def similarity_align(src, dst):
    """Least-squares similarity transform of ``src`` onto ``dst``.

    Returns ``(aligned_src, rms_error)``.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    a, b = src - mu_s, dst - mu_d
    u, s, vt = np.linalg.svd(b.T @ a)
    d = np.sign(np.linalg.det(u @ vt))
    corr = np.diag([1.0, 1.0, d])
    rot = u @ corr @ vt
    scale = np.trace(np.diag(s) @ corr) / (a * a).sum()
    aligned = scale * a @ rot.T + mu_d
    return aligned, float(np.sqrt(((aligned - dst) ** 2).sum(1).mean()))


def rotation_angle_between(r1, r2) -> float:
    """Angle in degrees of ``r1^T r2`` (matrices or axis-angle vectors)."""
    r1 = rotvec_to_matrix(r1) if np.shape(r1) == (3,) else np.asarray(r1)
    r2 = rotvec_to_matrix(r2) if np.shape(r2) == (3,) else np.asarray(r2)
    c = (np.trace(r1.T @ r2) - 1) / 2
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def orbit_extrinsics(yaw_deg: float, pitch_deg: float, distance: float) -> CameraExtrinsics:
    """Camera at ``distance`` from the origin, looking at it."""
    mat = Rotation.from_euler("x", pitch_deg, degrees=True).as_matrix() @ \
        Rotation.from_euler("y", yaw_deg, degrees=True).as_matrix()
    return CameraExtrinsics(Rotation.from_matrix(mat).as_rotvec(), np.array([0.0, 0.0, distance]))


def pixel_rays(extr: CameraExtrinsics, intr: CameraIntrinsics, uv=None):
    """World-space rays through pixel positions ``uv`` ``(P, 2)``.

    Defaults to every pixel centre in row-major order.  Returns
    ``(origin (3,), directions (P, 3))`` with unit directions.
    """
    if uv is None:
        jj, ii = np.meshgrid(np.arange(intr.width), np.arange(intr.height))
        uv = np.stack([jj.ravel() + 0.5, ii.ravel() + 0.5], axis=1)
    uv = np.asarray(uv, dtype=np.float64)
    d = np.column_stack([(uv[:, 0] - intr.cx) / intr.focal, (uv[:, 1] - intr.cy) / intr.focal,
                         np.ones(len(uv))])
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    rot = extr.matrix
    return extr.center, d @ rot
