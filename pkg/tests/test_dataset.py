from __future__ import annotations

import filecmp
import shutil

import numpy as np
import pytest
from hypothesis import given, strategies as st

from glonerf.camera import (CameraExtrinsics, CameraIntrinsics, LandmarkSet, fit_camera,
                            pixel_rays, rotation_angle_between)
from glonerf.dataset import (DatasetError, load_dataset, read_camera, read_canonical, read_depth,
                             read_image, read_landmarks, read_manifest, write_camera,
                             write_landmarks)
from glonerf.metrics import PSNR_CAP, depth_correlation, pearson, psnr
from glonerf.synthetic import (SceneObject, Sphere, SyntheticSceneSpec, generate_synthetic, shade,
                               trace)


def _tiny(tmp_path, count, size=8, seed=0, name="data"):
    return generate_synthetic(tmp_path / name, count, seed=seed,
                              spec=SyntheticSceneSpec(image_size=size), eval_split=False)


# -- loader errors ------------------------------------------------------------

def test_empty_directory(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)


def test_no_images(tmp_path):
    (tmp_path / "images").mkdir()
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)


def test_landmark_count_mismatch(tmp_path):
    root = _tiny(tmp_path, 3)
    (root / "landmarks" / "000001.txt").unlink()
    with pytest.raises(DatasetError, match="landmark"):
        load_dataset(root)


def test_cameras_fitted_when_absent(tmp_path):
    root = _tiny(tmp_path, 3, size=64)
    truth = [read_camera(p) for p in sorted((root / "cameras").glob("*.txt"))]
    shutil.rmtree(root / "cameras")
    ds = load_dataset(root)
    assert len(ds) == 3
    for ex, (extr, intr) in zip(ds, truth):
        assert ex.camera_source == "fitted"
        assert rotation_angle_between(ex.extrinsics.rotation, extr.rotation) < 0.5
        np.testing.assert_allclose(ex.extrinsics.translation, extr.translation, atol=1e-3)
        assert ex.intrinsics.focal == pytest.approx(intr.focal, rel=1e-4)


def test_cameras_absent_without_canonical(tmp_path):
    root = _tiny(tmp_path, 3)
    shutil.rmtree(root / "cameras")
    (root / "canonical_keypoints.txt").unlink()
    with pytest.raises(DatasetError, match="canonical"):
        load_dataset(root)


@pytest.fixture(scope="module")
def thousand(tmp_path_factory):
    return _tiny(tmp_path_factory.mktemp("big"), 1000, size=8, seed=9)


def test_one_corrupt_file_in_a_thousand_is_skipped(thousand, tmp_path, caplog):
    root = tmp_path / "copy"
    shutil.copytree(thousand, root)
    (root / "landmarks" / "000417.txt").write_text("not a landmark file\n")
    ds = load_dataset(root)
    assert len(ds) == 999
    assert [name for name, _ in ds.skipped] == ["000417"]
    assert "000417" in caplog.text
    assert [ex.index for ex in ds] == list(range(999))
    assert ds[417].name == "000418"


def test_one_percent_corrupt_is_fatal(thousand, tmp_path):
    root = tmp_path / "copy"
    shutil.copytree(thousand, root)
    for k in range(0, 1000, 100):
        (root / "images" / f"{k:06d}.png").write_bytes(b"\x89PNG broken")
    with pytest.raises(DatasetError, match="10 of 1000"):
        load_dataset(root)


# -- synthetic corpus ---------------------------------------------------------

def test_generation_is_deterministic(tmp_path):
    a = generate_synthetic(tmp_path / "a", 4, seed=5, spec=SyntheticSceneSpec(image_size=16))
    b = generate_synthetic(tmp_path / "b", 4, seed=5, spec=SyntheticSceneSpec(image_size=16))
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    _, mismatch, errors = filecmp.cmpfiles(a, b, [str(f) for f in files], shallow=False)
    assert not mismatch and not errors


def test_round_trip(small_corpus, small_dataset):
    from PIL import Image

    for ex in small_dataset:
        raw = np.asarray(Image.open(small_corpus / "images" / f"{ex.name}.png"))
        np.testing.assert_array_equal(np.round(ex.image * 255).astype(np.uint8), raw)
    manifest = read_manifest(small_corpus / "manifest.txt")
    assert manifest["K"] == len(small_dataset) == 6
    assert (manifest["width"], manifest["height"]) == (24, 24)


def test_synthetic_landmarks_recover_camera(small_dataset):
    for ex in small_dataset:
        fit = fit_camera(ex.landmarks, small_dataset.canonical, ex.intrinsics)
        assert rotation_angle_between(fit.extrinsics.rotation, ex.extrinsics.rotation) < 0.5
        np.testing.assert_allclose(fit.extrinsics.translation, ex.extrinsics.translation,
                                   atol=1e-3)


def test_mask_matches_finite_depth(small_dataset):
    for ex in small_dataset:
        np.testing.assert_array_equal(ex.mask > 0.5, np.isfinite(ex.depth))
        assert 0 < ex.mask.mean() < 1


def test_keypoint_depths_are_camera_distances(small_dataset):
    for ex in small_dataset:
        dist = np.linalg.norm(ex.keypoints - ex.extrinsics.center, axis=1)
        np.testing.assert_allclose(ex.keypoint_depths, dist, rtol=1e-12)


def _single_sphere(radius):
    return SceneObject([Sphere(np.zeros(3), radius, np.full(3, 0.5))], np.zeros(3), np.ones(3))


@given(st.floats(0.1, 0.9), st.floats(2.0, 5.0))
def test_on_axis_sphere_depth(radius, dist):
    t, idx = trace(_single_sphere(radius), np.array([0, 0, -dist]), np.array([[0, 0, 1.0]]))
    assert idx[0] == 0
    assert t[0] == pytest.approx(dist - radius, abs=1e-12)


def _march(sdf, origin, dirs, t_max=8.0, step=1e-3):
    """Fixed-step march to the first sign change, refined by bisection."""
    out = np.full(len(dirs), np.inf)
    ts = np.arange(0.0, t_max, step)
    for i, d in enumerate(dirs):
        vals = sdf(origin + ts[:, None] * d)
        cross = np.flatnonzero(vals <= 0)
        if not cross.size:
            continue
        lo, hi = ts[cross[0] - 1], ts[cross[0]]
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            if sdf(origin + mid * d) > 0:
                lo = mid
            else:
                hi = mid
        out[i] = hi
    return out


def test_depth_agrees_with_brute_force_march(small_corpus, small_dataset):
    from glonerf.synthetic import sample_object

    spec = SyntheticSceneSpec(image_size=24)
    streams = np.random.SeedSequence(3).spawn(6)
    rng = np.random.default_rng(0)
    checked = 0
    for k, ex in enumerate(small_dataset):
        obj = sample_object(spec, np.random.default_rng(streams[k]))
        origin, dirs = ex.rays()
        hit = np.flatnonzero(np.isfinite(ex.depth.ravel()))
        miss = np.flatnonzero(~np.isfinite(ex.depth.ravel()))
        pick = np.concatenate([rng.choice(hit, 14, replace=False), rng.choice(miss, 3, replace=False)])
        marched = _march(obj.sdf, origin, dirs[pick])
        stored = ex.depth.ravel()[pick]
        finite = np.isfinite(stored)
        np.testing.assert_array_equal(np.isfinite(marched), finite)
        # stored depth is float32
        np.testing.assert_allclose(marched[finite], stored[finite], atol=1e-3)
        checked += pick.size
    assert checked >= 100


def test_shading_is_lambertian():
    obj = _single_sphere(0.5)
    spec = SyntheticSceneSpec()
    color, hit, _ = shade(obj, spec, np.array([0, 0, -3.0]), np.array([[0, 0, 1.0]]))
    n_dot_l = max(0.0, np.array([0, 0, -1.0]) @ spec.light)
    expected = 0.5 * (spec.ambient + (1 - spec.ambient) * n_dot_l)
    assert hit[0]
    np.testing.assert_allclose(color[0], expected, atol=1e-12)


# -- file formats -------------------------------------------------------------

def test_landmark_and_camera_files_round_trip(tmp_path, rng):
    pts = rng.uniform(0, 64, (5, 2))
    valid = np.array([1, 0, 1, 1, 0], bool)
    write_landmarks(tmp_path / "l.txt", pts, valid)
    lm = read_landmarks(tmp_path / "l.txt")
    np.testing.assert_array_equal(lm.points, pts)
    np.testing.assert_array_equal(lm.valid, valid)
    extr = CameraExtrinsics(rng.normal(size=3), rng.normal(size=3))
    intr = CameraIntrinsics(87.25, 31.5, 32.5, 64, 65)
    write_camera(tmp_path / "c.txt", extr, intr)
    e2, i2 = read_camera(tmp_path / "c.txt")
    np.testing.assert_array_equal(e2.rotation, extr.rotation)
    np.testing.assert_array_equal(e2.translation, extr.translation)
    assert i2 == intr


def test_canonical_file(small_corpus, small_dataset):
    kp = read_canonical(small_corpus / "canonical_keypoints.txt")
    assert kp.is_symmetric()
    np.testing.assert_array_equal(kp.points, small_dataset.canonical.points)


def test_depth_file_is_little_endian_float32(small_corpus):
    raw = np.fromfile(small_corpus / "depth" / "000000.bin", dtype="<f4")
    assert raw.size == 24 * 24
    np.testing.assert_array_equal(read_depth(small_corpus / "depth" / "000000.bin", 24, 24),
                                  raw.reshape(24, 24))


def test_image_values_in_unit_range(small_corpus):
    img = read_image(small_corpus / "images" / "000000.png")
    assert img.shape == (24, 24, 3) and img.min() >= 0 and img.max() <= 1


def test_rays_cover_every_pixel(small_dataset):
    ex = small_dataset[0]
    origin, dirs = ex.rays()
    assert dirs.shape == (24 * 24, 3)
    np.testing.assert_allclose(origin, ex.extrinsics.center)
    o2, d2 = pixel_rays(ex.extrinsics, ex.intrinsics)
    np.testing.assert_array_equal(dirs, d2)


def test_landmarks_outside_image_are_skipped(tmp_path):
    root = _tiny(tmp_path, 3, size=16)
    lm = read_landmarks(root / "landmarks" / "000002.txt")
    pts = lm.points.copy()
    pts[0] = (-5.0, 3.0)
    write_landmarks(root / "landmarks" / "000002.txt", pts, np.ones(len(pts), bool))
    # one bad item in three is beyond the 1% tolerance
    with pytest.raises(DatasetError):
        load_dataset(root)


# -- metrics ------------------------------------------------------------------

def test_psnr_examples():
    a = np.full((4, 4, 3), 0.3)
    assert psnr(a, a) == PSNR_CAP == 99.0
    assert psnr(np.zeros((2, 2, 3)), np.ones((2, 2, 3))) == 0.0
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))


def test_depth_correlation_examples():
    t = np.array([2.1, 2.5, 1.9, 3.0])
    assert depth_correlation(t, t) == pytest.approx(1.0)
    assert depth_correlation(3 * t - 7, t) == pytest.approx(1.0)
    assert depth_correlation([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert depth_correlation([t, np.array([1.0, 2, 3])], [t, np.array([3.0, 2, 1])]) == \
        pytest.approx(0.0, abs=1e-12)


def test_depth_correlation_errors():
    with pytest.raises(ValueError):
        pearson([1, 2], [1, 2])
    with pytest.raises(ValueError):
        pearson([1, 1, 1], [1, 2, 3])


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=12), st.floats(0.01, 100),
       st.floats(-100, 100), st.integers(0, 2**31))
def test_pearson_affine_invariance(x, a, b, seed):
    x = np.array(x)
    y = x + np.random.default_rng(seed).normal(size=x.size)
    if np.ptp(x) < 1e-3:
        return
    r = pearson(x, y)
    assert -1 <= r <= 1
    assert pearson(a * x + b, y) == pytest.approx(r, abs=1e-9)
