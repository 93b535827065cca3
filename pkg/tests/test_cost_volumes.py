import numpy as np
import pytest
import torch

from atvsnet import cost_volumes as cv
from atvsnet.geometry import disparity_planes, plane_sweep_warp, project_pixel
from conftest import camera, pair, rotation

H, W = 7, 8


def _expand(cams, B):
    return type(cams)(*(x.expand(B, *x.shape[1:]) for x in cams))


# ---- concatenation volume -------------------------------------------------


def test_concat_constant_example():
    f_ref = torch.full((1, 1, 3, 4), 2.0)
    warped = torch.full((1, 1, 5, 3, 4), 3.0)
    vol = cv.concat_cost_volume(f_ref, warped)
    assert vol.shape == (1, 2, 5, 3, 4)
    assert torch.all(vol[:, 0] == 2.0) and torch.all(vol[:, 1] == 3.0)


def test_concat_identity_cameras_halves_equal():
    cam = camera()
    f = torch.randn(1, 3, H, W)
    warped, _ = plane_sweep_warp(f, disparity_planes(0.1, 0.05, 4), pair(cam, cam, torch.float32))
    vol = cv.concat_cost_volume(f, warped)
    assert torch.equal(vol[:, :3], vol[:, 3:])


def test_concat_random_per_voxel(rng):
    f_ref = torch.from_numpy(rng.standard_normal((2, 3, 4, 5)))
    warped = torch.from_numpy(rng.standard_normal((2, 3, 6, 4, 5)))
    vol = cv.concat_cost_volume(f_ref, warped)
    for i in range(6):
        assert torch.equal(vol[:, :3, i], f_ref)
        assert torch.equal(vol[:, 3:, i], warped[:, :, i])


def test_concat_shape_mismatch():
    with pytest.raises(ValueError):
        cv.concat_cost_volume(torch.zeros(1, 2, 4, 4), torch.zeros(1, 3, 5, 4, 4))
    with pytest.raises(ValueError):
        cv.concat_cost_volume(torch.zeros(1, 2, 4, 4), torch.zeros(1, 2, 5, 4, 3))


# ---- geometric cost, reference side --------------------------------------


def test_geometric_ref_zero_at_matching_plane():
    planes = disparity_planes(0.1, 0.05, 6)
    d = torch.full((1, 3, 3), planes.values[2], dtype=torch.float64)
    vol = cv.geometric_cost_ref(d, planes)
    assert torch.all(vol[:, 0, 2] == 0)


def test_geometric_ref_at_d_min():
    planes = disparity_planes(0.2, 0.05, 6)
    d = torch.full((1, 2, 2), 0.2, dtype=torch.float64)
    vol = cv.geometric_cost_ref(d, planes)
    for i in range(6):
        assert torch.allclose(vol[0, 0, i], torch.full((2, 2), (i + 1) * 0.05, dtype=torch.float64), atol=1e-12)


def test_geometric_ref_loop_oracle(rng):
    planes = disparity_planes(0.1, 0.03, 5)
    d = rng.uniform(0.1, 0.3, (2, 3, 4))
    vol = cv.geometric_cost_ref(torch.from_numpy(d), planes).numpy()
    for b in range(2):
        for i in range(5):
            for y in range(3):
                for x in range(4):
                    assert vol[b, 0, i, y, x] == pytest.approx(abs(d[b, y, x] - planes.values[i]), abs=1e-12)


def test_geometric_ref_reversed_planes_symmetry(rng):
    planes = disparity_planes(0.1, 0.03, 7)
    d = torch.from_numpy(rng.uniform(0.1, 0.35, (1, 3, 4)))
    forward = cv.geometric_cost_ref(d, planes)
    rev = torch.from_numpy(planes.reversed_values()).reshape(1, 1, -1, 1, 1)
    built_reversed = (d[:, None, None] - rev).abs()
    assert torch.equal(built_reversed, torch.flip(forward, dims=[2]))


# ---- geometric cost, source side ------------------------------------------


def test_geometric_source_identity_equals_ref(rng):
    cam = camera()
    planes = disparity_planes(0.1, 0.05, 6)
    d = torch.from_numpy(rng.uniform(0.15, 0.4, (1, H, W)))
    src_vol = cv.geometric_cost_source(d, d, planes, pair(cam, cam))
    assert torch.equal(src_vol, cv.geometric_cost_ref(d, planes))


def _plane_scene(ref, src, Z):
    """Disparity maps of a fronto-parallel (in the reference) plane at depth ``Z``."""
    d_ref = np.full((H, W), 1.0 / Z)
    Kinv = np.linalg.inv(src.intrinsics)
    d_src = np.zeros((H, W))
    for y in range(H):
        for x in range(W):
            ray = src.rotation.T @ (Kinv @ np.array([x, y, 1.0]))
            c = src.center
            t = (Z - c[2]) / ray[2]
            d_src[y, x] = 1.0 / t  # ray parameter equals source depth
    return torch.from_numpy(d_ref)[None], torch.from_numpy(d_src)[None]


def test_geometric_source_consistent_plane_zero_at_its_plane(translated_pair):
    ref, src = translated_pair
    planes = disparity_planes(0.1, 0.05, 6)
    Z = 1.0 / planes.values[2]
    d_ref, d_src = _plane_scene(ref, src, Z)
    vol = cv.geometric_cost_source(d_ref, d_src, planes, pair(ref, src))
    e, ok = cv.geometric_error(d_ref, d_src, pair(ref, src))
    assert ok.sum() > 10
    assert torch.all(vol[:, 0, 2][ok].abs() < 1e-9)
    # pixels without a valid correspondence carry the sentinel
    assert torch.all(vol[:, 0, :, ~ok[0]] == planes.span)


def test_geometric_source_out_of_image_sentinel():
    ref = camera()
    src = camera(t=(100.0, 0.0, 0.0))
    planes = disparity_planes(0.1, 0.05, 4)
    d = torch.full((1, H, W), 0.3, dtype=torch.float64)
    vol = cv.geometric_cost_source(d, d, planes, pair(ref, src))
    assert torch.all(vol == planes.span)
    assert torch.isfinite(vol).all()


def test_geometric_volume_channel_order(translated_pair, rng):
    ref, src = translated_pair
    planes = disparity_planes(0.1, 0.05, 5)
    d_ref = torch.from_numpy(rng.uniform(0.15, 0.3, (1, H, W)))
    d_src = torch.from_numpy(rng.uniform(0.15, 0.3, (1, H, W)))
    vol = cv.geometric_volume(d_ref, d_src, planes, pair(ref, src))
    assert torch.equal(vol[:, :1], cv.geometric_cost_ref(d_ref, planes))
    assert torch.equal(vol[:, 1:], cv.geometric_cost_source(d_ref, d_src, planes, pair(ref, src)))


# ---- photometric error ----------------------------------------------------


def test_photometric_identity_zero():
    cam = camera()
    f = torch.randn(1, 4, H, W, dtype=torch.float64)
    d = torch.full((1, H, W), 0.3, dtype=torch.float64)
    assert torch.equal(cv.photometric_error(f, f, d, pair(cam, cam)), torch.zeros_like(f))


def test_photometric_constant_offset_ones():
    cam = camera()
    f = torch.randn(1, 4, H, W, dtype=torch.float64)
    d = torch.full((1, H, W), 0.3, dtype=torch.float64)
    e = cv.photometric_error(f, f + 1.0, d, pair(cam, cam))
    assert torch.allclose(e, torch.ones_like(e), atol=1e-12)


def test_photometric_matches_sampling_oracle(translated_pair, rng):
    from test_geometry import _loop_bilinear

    ref, src = translated_pair
    f_ref = rng.standard_normal((3, H, W))
    f_src = rng.standard_normal((3, H, W))
    d = rng.uniform(0.15, 0.4, (H, W))
    e = cv.photometric_error(torch.from_numpy(f_ref)[None], torch.from_numpy(f_src)[None],
                             torch.from_numpy(d)[None], pair(ref, src)).numpy()[0]
    for y in range(H):
        for x in range(W):
            (sx, sy), ok = project_pixel([float(x), float(y)], d[y, x], ref, src)
            sampled = _loop_bilinear(f_src, float(sx), float(sy)) if ok else np.zeros(3)
            assert np.allclose(e[:, y, x], np.abs(sampled - f_ref[:, y, x]), atol=1e-6)


# ---- geometric error ------------------------------------------------------


def test_geometric_error_identity():
    cam = camera()
    d = torch.rand(1, H, W, dtype=torch.float64) + 0.1
    e, ok = cv.geometric_error(d, d, pair(cam, cam))
    assert torch.equal(e, torch.zeros_like(e))
    e, _ = cv.geometric_error(d, d + 0.07, pair(cam, cam))
    assert torch.allclose(e, torch.full_like(e, 0.07), atol=1e-12)
    assert (e >= 0).all()


def test_geometric_error_consistent_scene(translated_pair):
    ref, src = translated_pair
    d_ref, d_src = _plane_scene(ref, src, 3.0)
    e, ok = cv.geometric_error(d_ref, d_src, pair(ref, src))
    assert ok.float().mean() > 0.5
    assert e[0, 0][ok[0]].max() < 1e-9


# ---- tiling ---------------------------------------------------------------


def test_tile_along_depth():
    e = torch.randn(2, 3, 4, 5)
    one = cv.tile_along_depth(e, 1)
    assert one.shape == (2, 3, 1, 4, 5) and torch.equal(one[:, :, 0], e)
    many = cv.tile_along_depth(e, 16)
    for i in range(16):
        assert torch.equal(many[:, :, i], e)
    with pytest.raises(ValueError):
        cv.tile_along_depth(e, 0)


# ---- visual hull ----------------------------------------------------------


def test_hull_all_ones_when_maps_exceed_planes():
    cam = camera()
    planes = disparity_planes(0.1, 0.05, 5)
    big = torch.full((1, H, W), 10.0, dtype=torch.float64)
    h = cv.visual_hull([big, big], [(pair(cam, cam).K_ref, pair(cam, cam).E_ref)] * 2, planes,
                       (pair(cam, cam).K_ref, pair(cam, cam).E_ref))
    assert torch.equal(h, torch.ones_like(h))


def test_hull_half_when_one_view_passes():
    cam = camera()
    K, E = pair(cam, cam).K_ref, pair(cam, cam).E_ref
    planes = disparity_planes(0.1, 0.05, 5)
    big = torch.full((1, H, W), 10.0, dtype=torch.float64)
    small = torch.full((1, H, W), 0.01, dtype=torch.float64)
    h = cv.visual_hull([big, small], [(K, E), (K, E)], planes, (K, E))
    assert torch.equal(h, torch.full_like(h, 0.5))


def test_hull_step_is_closed_at_zero():
    cam = camera()
    K, E = pair(cam, cam).K_ref, pair(cam, cam).E_ref
    planes = disparity_planes(0.1, 0.05, 5)
    exact = torch.full((1, H, W), float(planes.values[2]), dtype=torch.float64)
    h = cv.visual_hull([exact], [(K, E)], planes, (K, E))
    assert torch.all(h[:, 0, :3] == 1) and torch.all(h[:, 0, 3:] == 0)


def _hull_oracle(maps, cams, planes, ref):
    from test_geometry import _loop_bilinear

    N = len(maps)
    out = np.zeros((planes.count, H, W))
    for i, d_i in enumerate(planes.values):
        for y in range(H):
            for x in range(W):
                X = np.linalg.inv(ref.intrinsics) @ np.array([x, y, 1.0]) / d_i
                Xw = ref.rotation.T @ (X - ref.translation)
                total = 0
                for m, cam in zip(maps, cams):
                    Xc = cam.rotation @ Xw + cam.translation
                    if Xc[2] <= 0:
                        continue
                    p = cam.intrinsics @ Xc
                    sx, sy = p[0] / p[2], p[1] / p[2]
                    if not (0 <= sx <= W - 1 and 0 <= sy <= H - 1):
                        continue
                    sampled = _loop_bilinear(m[None], sx, sy)[0]
                    total += sampled - 1.0 / Xc[2] >= 0
                out[i, y, x] = total / N
    return out


def test_hull_matches_voxel_oracle(rng):
    ref = camera()
    cams = [ref, camera(rotation(0.02, -0.03, 0.0), t=(-0.3, 0.0, 0.0)), camera(rotation(-0.01, 0.04, 0.0), t=(0.3, 0.1, 0.0))]
    planes = disparity_planes(0.1, 0.05, 6)
    maps = [rng.uniform(0.1, 0.45, (H, W)) for _ in cams]
    tens = [pair(c, c) for c in cams]
    h = cv.visual_hull([torch.from_numpy(m)[None] for m in maps], [(t.K_ref, t.E_ref) for t in tens], planes,
                       (tens[0].K_ref, tens[0].E_ref))
    expected = _hull_oracle(maps, cams, planes, ref)
    mismatch = np.abs(h[0, 0].numpy() - expected) > 1e-9
    # the step test is discontinuous: allow disagreement only where the voxel sits on the step
    assert mismatch.mean() < 0.01
    vals = np.unique(h.numpy() * 3)
    assert np.allclose(vals, np.round(vals), atol=1e-9)


def test_hull_empty_list():
    planes = disparity_planes(0.1, 0.05, 4)
    with pytest.raises(ValueError):
        cv.visual_hull([], [], planes, (torch.eye(3)[None], torch.eye(4)[None]))


def test_invalid_cost_equals_span():
    assert cv.invalid_cost(disparity_planes(0.1, 0.025, 16)) == pytest.approx(0.4)
