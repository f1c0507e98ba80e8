import json

import numpy as np
import pytest

from prunefield.errors import DimensionMismatchError, MalformedFileError, MissingFileError
from prunefield.geometry import Camera, ring_cameras
from prunefield.synth import (AnalyticScene, DistractorSpec, Sphere, disk_mask, expected_mask_fraction,
                              generate_dataset, inject_distractors, load_dataset, render_clean,
                              two_sphere_cameras, two_sphere_scene, visible_from)


def axis_camera(size=64, f=50.0):
    return Camera(fx=f, fy=f, cx=size / 2, cy=size / 2, width=size, height=size,
                  rotation=np.eye(3), translation=np.zeros(3))


def test_empty_scene_is_background():
    scene = AnalyticScene(primitives=(), background=(0.2, 0.3, 0.4), far=7.0)
    img, depth = render_clean(scene, axis_camera(16))
    np.testing.assert_array_equal(img, np.broadcast_to([0.2, 0.3, 0.4], img.shape))
    assert np.all(depth == 7.0)


def test_sphere_silhouette_and_depth():
    D, r, f = 4.0, 1.0, 50.0
    scene = AnalyticScene(primitives=(Sphere((0, 0, D), r, (1, 1, 1)),), background=(0, 0, 0))
    cam = axis_camera(64, f)
    img, depth = render_clean(scene, cam)
    hit = depth < scene.far
    radius_px = f * r / np.sqrt(D * D - r * r)
    py, px = np.mgrid[:64, :64]
    dist = np.hypot(px + 0.5 - 32, py + 0.5 - 32)
    # every hit pixel lies within one pixel of the analytic silhouette disk, and vice versa
    assert np.all(dist[hit] <= radius_px + 1)
    assert np.all(hit[dist <= radius_px - 1])
    center = Camera(fx=f, fy=f, cx=32.5, cy=32.5, width=64, height=64, rotation=np.eye(3),
                    translation=np.zeros(3))
    _, d2 = render_clean(scene, center)
    assert abs(d2[32, 32] - (D - r)) < 1e-9


def test_visibility_oracle():
    scene = two_sphere_scene()
    cam = Camera.look_at([0, 0, 4], [0, 0, 0], up=(0, 1, 0), fx=30, width=32, height=32)
    top = np.array([[0.0, 0.0, 1.0]])
    bottom = np.array([[0.0, 0.0, -1.0]])
    assert visible_from(scene, cam, top)[0]
    assert not visible_from(scene, cam, bottom)[0]


def test_no_distractors_when_probability_zero(rng):
    img = rng.uniform(size=(20, 30, 3))
    out, mask = inject_distractors(img, DistractorSpec(per_view_probability=0.0), 0)
    np.testing.assert_array_equal(out, img)
    assert not mask.any()


def test_disk_pixel_count():
    n = disk_mask(40, 40, 20.3, 19.7, 5.0).sum()
    assert 69 <= n <= 81


def test_injection_deterministic_and_consistent(rng):
    img = rng.uniform(size=(48, 48, 3))
    spec = DistractorSpec(per_view_probability=1.0, shape="mixed", seed=11)
    a, ma = inject_distractors(img, spec, 4)
    b, mb = inject_distractors(img, spec, 4)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(ma, mb)
    np.testing.assert_array_equal(a[~ma], img[~ma])
    assert ma.any()
    assert np.mean(np.any(a[ma] != img[ma], axis=-1)) >= 0.95


def test_generate_and_load(tmp_path):
    scene = two_sphere_scene()
    cams, _ = two_sphere_cameras(20, 24)
    spec = DistractorSpec(seed=5)
    man = generate_dataset(scene, cams, spec, tmp_path / "d")
    man2 = generate_dataset(scene, cams, spec, tmp_path / "e")
    assert man.contaminated_views == man2.contaminated_views
    ds = load_dataset(tmp_path / "d")
    assert ds.images.shape == (20, 24, 24, 3) and ds.masks.shape == (20, 24, 24)
    for sub in ("views", "clean", "gt_masks"):
        assert len(list((tmp_path / "d" / sub).glob("view_*.png"))) == 20
    # 8-bit round trip is exact
    clean8 = np.round(render_clean(scene, cams[3])[0] * 255)
    np.testing.assert_array_equal(np.round(ds.clean[3] * 255), clean8)
    # contaminated = clean outside the mask
    out = ~ds.masks
    np.testing.assert_array_equal(ds.images[out], ds.clean[out])


def test_mask_fraction_matches_expectation(tmp_path):
    scene = AnalyticScene(primitives=(), background=(0.5, 0.5, 0.5))
    cams = ring_cameras(200, radius=3.0, z=0.0, fx=40.0, width=64, height=64)
    spec = DistractorSpec(seed=2)
    masks = np.stack([inject_distractors(np.zeros((64, 64, 3)), spec, i)[1] for i in range(len(cams))])
    assert abs(masks.mean() - expected_mask_fraction(spec, 64, 64)) < 0.02


def test_load_errors(tmp_path):
    scene = two_sphere_scene()
    cams, _ = two_sphere_cameras(3, 16)
    root = tmp_path / "d"
    generate_dataset(scene, cams, DistractorSpec(seed=1), root)
    # missing masks are tolerated
    for p in (root / "gt_masks").glob("*.png"):
        p.unlink()
    assert load_dataset(root).masks is None
    # corrupted cameras.json
    good = (root / "cameras.json").read_text()
    (root / "cameras.json").write_text("[{")
    with pytest.raises(MalformedFileError):
        load_dataset(root)
    (root / "cameras.json").write_text(good)
    # size mismatch
    from PIL import Image
    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(root / "views" / "view_0001.png")
    with pytest.raises(DimensionMismatchError):
        load_dataset(root)
    (root / "views" / "view_0001.png").unlink()
    with pytest.raises(MissingFileError):
        load_dataset(root)
    with pytest.raises(MissingFileError):
        load_dataset(tmp_path / "nothing")
