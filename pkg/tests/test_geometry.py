import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from atvsnet.geometry import (
    CameraModel,
    bilinear_sample,
    correspondences,
    disparity_planes,
    pixel_grid,
    plane_sweep_warp,
    project_pixel,
    rescale_disparity,
)
from conftest import camera, pair, rotation


# ---- planes ---------------------------------------------------------------


def test_planes_small_example():
    assert np.allclose(disparity_planes(0.0, 0.01, 3).values, [0.01, 0.02, 0.03], atol=1e-15)


def test_planes_full_count_last_plane():
    assert disparity_planes(0.0, 0.01, 128).highest == pytest.approx(1.28, abs=1e-12)


@pytest.mark.parametrize("args", [(0.5, 0.0, 4), (0.1, -0.1, 4), (0.1, 0.1, 0), (-0.1, 0.1, 4)])
def test_planes_reject_degenerate(args):
    with pytest.raises(ValueError):
        disparity_planes(*args)


@given(st.floats(0, 10), st.floats(1e-4, 1.0), st.integers(1, 200))
def test_planes_strictly_increasing(d_min, delta, D):
    v = disparity_planes(d_min, delta, D).values
    assert len(v) == D
    assert np.all(np.diff(v) > 0)


def test_planes_span_and_bounds():
    p = disparity_planes(0.1, 0.025, 16)
    assert p.lowest == pytest.approx(0.125)
    assert p.highest == pytest.approx(0.5)
    assert p.span == pytest.approx(0.4)


# ---- camera model ---------------------------------------------------------


def test_camera_rejects_bad_intrinsics():
    with pytest.raises(ValueError):
        CameraModel(np.diag([-1.0, 1.0, 1.0]), np.eye(4), (4, 4))
    K = np.eye(3)
    K[1, 0] = 0.3
    with pytest.raises(ValueError):
        CameraModel(K, np.eye(4), (4, 4))


def test_camera_rejects_non_rigid_pose():
    E = np.eye(4)
    E[0, 0] = 1.01
    with pytest.raises(ValueError):
        CameraModel(np.eye(3), E, (4, 4))
    E = np.eye(4)
    E[:3, :3] = np.diag([1.0, 1.0, -1.0])  # reflection
    with pytest.raises(ValueError):
        CameraModel(np.eye(3), E, (4, 4))


def test_camera_center_and_scaling():
    cam = camera(rotation(0.1, 0.2, 0.3), t=(1.0, 2.0, 3.0), size=(64, 48), f=50.0, cx=32.0, cy=24.0)
    c = cam.center
    assert np.allclose(cam.rotation @ c + cam.translation, 0.0, atol=1e-12)
    small = cam.scaled(4)
    assert small.image_size == (16, 12)
    assert small.intrinsics[0, 0] == pytest.approx(12.5)
    assert small.intrinsics[1, 2] == pytest.approx(6.0)


# ---- projection -----------------------------------------------------------


def test_project_identity_cameras():
    cam = camera()
    u = torch.tensor([[0.0, 0.0], [3.3, 5.1], [7.0, 2.0]])
    coords, valid = project_pixel(u, 0.37, cam, cam)
    assert torch.equal(coords, u.double())
    assert valid.all()


def test_project_hand_computed_translation():
    K = np.array([[100.0, 0, 50], [0, 100.0, 50], [0, 0, 1]])
    ref = CameraModel(K, np.eye(4), (100, 100))
    E = np.eye(4)
    E[0, 3] = 1.0  # world x -> x + 1 in the source frame
    src = CameraModel(K, E, (100, 100))
    coords, valid = project_pixel([50.0, 50.0], 1.0, ref, src)
    assert torch.allclose(coords, torch.tensor([150.0, 50.0], dtype=torch.float64), atol=1e-12)
    assert bool(valid)


def test_project_behind_camera_flagged():
    ref = camera()
    src = camera(rotation(0.0, np.pi, 0.0))  # looking backwards
    _, valid = project_pixel([3.0, 3.0], 0.5, ref, src)
    assert not bool(valid)


def test_project_rejects_nonpositive_disparity():
    cam = camera()
    with pytest.raises(ValueError):
        project_pixel([1.0, 1.0], 0.0, cam, cam)


@settings(max_examples=40, deadline=None)
@given(
    st.floats(-0.2, 0.2), st.floats(-0.2, 0.2), st.floats(-0.2, 0.2),
    st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.floats(-0.2, 0.2),
    st.floats(0, 7), st.floats(0, 6), st.floats(0.1, 0.6),
)
def test_project_round_trip(ax, ay, az, tx, ty, tz, x, y, d):
    ref = camera()
    src = camera(rotation(ax, ay, az), t=(tx, ty, tz))
    coords, valid = project_pixel([x, y], d, ref, src)
    # disparity of the same point in the source frame
    X = np.linalg.inv(ref.intrinsics) @ np.array([x, y, 1.0]) / d
    z_src = (src.rotation @ X + src.translation)[2]
    if not valid or z_src <= 1e-3:
        return
    back, ok = project_pixel(coords, 1.0 / z_src, src, ref)
    assert bool(ok)
    assert np.allclose(back.numpy(), [x, y], atol=1e-5)


# ---- bilinear sampling ----------------------------------------------------


def _loop_bilinear(img, x, y):
    C, H, W = img.shape
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    out = np.zeros(C)
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            w = (1 - abs(x - xi)) * (1 - abs(y - yi))
            if 0 <= xi < W and 0 <= yi < H:
                out += w * img[:, yi, xi]
    return out


def test_bilinear_integer_coordinates_exact():
    img = torch.randn(1, 3, 5, 6)
    grid = pixel_grid(5, 6).unsqueeze(0)
    out, inside = bilinear_sample(img, grid)
    assert torch.equal(out, img)
    assert inside.all()


def test_bilinear_midpoint_mean():
    img = torch.randn(1, 2, 4, 4, dtype=torch.float64)
    out, _ = bilinear_sample(img, torch.tensor([[[1.5, 2.5]]], dtype=torch.float64))
    expected = img[0, :, 2:4, 1:3].mean(dim=(1, 2))
    assert torch.allclose(out[0, :, 0], expected, atol=1e-12)


def test_bilinear_matches_loop_oracle(rng):
    img = rng.standard_normal((3, 6, 7))
    coords = rng.uniform(-1.5, 8.0, size=(40, 2))
    out, inside = bilinear_sample(torch.from_numpy(img)[None], torch.from_numpy(coords)[None, :, None])
    for k, (x, y) in enumerate(coords):
        assert np.allclose(out[0, :, k, 0].numpy(), _loop_bilinear(img, x, y), atol=1e-6)
        assert bool(inside[0, k, 0]) == (0 <= x <= 6 and 0 <= y <= 5)


def test_bilinear_far_outside_is_zero():
    img = torch.randn(1, 2, 4, 4)
    out, inside = bilinear_sample(img, torch.full((1, 3, 2), -16.0))
    assert torch.equal(out, torch.zeros_like(out))
    assert not inside.any()


# ---- plane sweep ----------------------------------------------------------


def test_warp_identity_cameras_exact():
    cam = camera()
    feat = torch.randn(2, 4, 7, 8)
    cams = pair(cam, cam, torch.float32)
    cams = type(cams)(*(x.expand(2, *x.shape[1:]) for x in cams))
    warped, mask = plane_sweep_warp(feat, disparity_planes(0.1, 0.05, 5), cams)
    for i in range(5):
        assert torch.equal(warped[:, :, i], feat)
    assert mask.all()


def test_warp_fronto_plane_against_projection_oracle(translated_pair, rng):
    ref, src = translated_pair
    planes = disparity_planes(0.1, 0.05, 6)
    feat = torch.from_numpy(rng.standard_normal((1, 3, 7, 8)))
    warped, mask = plane_sweep_warp(feat, planes, pair(ref, src))
    k = 3
    d_k = planes.values[k]
    for y in range(7):
        for x in range(8):
            (sx, sy), ok = project_pixel([float(x), float(y)], d_k, ref, src)
            inside = bool(ok) and 0 <= sx <= 7 and 0 <= sy <= 6
            # samples outside the image are zero-filled
            expected = _loop_bilinear(feat[0].numpy(), float(sx), float(sy)) if inside else np.zeros(3)
            assert np.allclose(warped[0, :, k, y, x].numpy(), expected, atol=1e-9)
            assert bool(mask[0, 0, k, y, x]) == inside


def test_warp_all_out_of_bounds_zero():
    ref = camera()
    src = camera(t=(100.0, 0.0, 0.0))
    feat = torch.randn(1, 2, 7, 8, dtype=torch.float64)
    warped, mask = plane_sweep_warp(feat, disparity_planes(0.1, 0.05, 4), pair(ref, src))
    assert torch.equal(warped, torch.zeros_like(warped))
    assert not mask.any()


# ---- disparity rescaling --------------------------------------------------


def test_rescale_identity_unchanged():
    cam = camera()
    cams = pair(cam, cam)
    d_ref = torch.rand(1, 7, 8, dtype=torch.float64) + 0.1
    d_src = torch.rand(1, 7, 8, dtype=torch.float64) + 0.1
    coords, valid = correspondences(d_ref, cams)
    d_star, ok = rescale_disparity(d_src, cams, coords, valid)
    assert torch.equal(d_star, d_src)
    assert ok.all()


def test_rescale_zero_source_stays_zero(translated_pair):
    ref, src = translated_pair
    cams = pair(ref, src)
    d_ref = torch.full((1, 7, 8), 0.3, dtype=torch.float64)
    coords, valid = correspondences(d_ref, cams)
    d_star, _ = rescale_disparity(torch.zeros_like(d_ref), cams, coords, valid)
    assert torch.equal(d_star, torch.zeros_like(d_star))


def test_rescale_pure_rotation_plane():
    # reference sees a fronto-parallel plane at depth Z; source rotates in place
    Z = 3.0
    ref = camera()
    R = rotation(0.03, -0.05, 0.02)
    src = camera(R)
    Kinv = np.linalg.inv(src.intrinsics)
    H, W = 7, 8
    d_src = np.zeros((H, W))
    for y in range(H):
        for x in range(W):
            ray_world = R.T @ (Kinv @ np.array([x, y, 1.0]))
            d_src[y, x] = ray_world[2] / Z  # 1 / source depth of the plane point
    cams = pair(ref, src)
    d_ref = torch.full((1, H, W), 1.0 / Z, dtype=torch.float64)
    coords, valid = correspondences(d_ref, cams)
    d_star, ok = rescale_disparity(torch.from_numpy(d_src)[None], cams, coords, valid)
    assert ok.any()
    assert torch.allclose(d_star[ok], d_ref[ok], atol=1e-9)
