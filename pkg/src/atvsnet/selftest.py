"""Quick invariant checks runnable from the command line."""

from __future__ import annotations

import tempfile
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from atvsnet import cost_volumes as cv
from atvsnet.aggregation import AAM, mean_pool_aggregate
from atvsnet.fusion import consistency_filter
from atvsnet.geometry import (
    CameraModel,
    CameraPair,
    correspondences,
    disparity_planes,
    plane_sweep_warp,
    rescale_disparity,
)
from atvsnet.io import read_pfm, write_pfm
from atvsnet.metrics import compute_metrics
from atvsnet.networks import NetworkConfig, TwoViewNet
from atvsnet.synthetic import Primitive, SceneSpec, default_intrinsics, generate_scene
from atvsnet.training import Checkpoint, LossWeights, TrainConfig, checkpoint_from_two_view, l1_loss, total_loss


def _l1_identity():
    x = torch.rand(2, 4, 4) + 0.1
    return float(l1_loss(x, x)) == 0.0 and abs(float(l1_loss(x + 0.5, x)) - 0.5) < 1e-6


def _total_loss_arithmetic():
    gt = torch.full((1, 3, 3), 0.2)
    pred = gt + 1.0
    full = float(total_loss(pred, [pred] * 3, gt, LossWeights()))
    only = float(total_loss(pred, None, gt, LossWeights()))
    return abs(full - 1.8) < 1e-6 and abs(only - 0.8) < 1e-6


def _lr_schedule():
    cfg = TrainConfig(learning_rate=1e-3, decay_factor=0.9, decay_interval=500)
    return cfg.lr_at(500) == 1e-3 and abs(cfg.lr_at(501) - 9e-4) < 1e-15


def _metrics_perfect():
    gt = np.random.default_rng(0).uniform(0.1, 0.5, (8, 8))
    r = compute_metrics(gt, gt, 0.025)
    return max(r.l1, r.l1_inv, r.l1_rel, r.sc_inv) == 0.0 and all(v == 100.0 for v in r.inlier.values())


def _sc_inv_scale():
    rng = np.random.default_rng(1)
    gt = rng.uniform(0.1, 0.5, (8, 8))
    pred = gt * rng.uniform(0.9, 1.1, (8, 8))
    a = compute_metrics(pred, gt, 0.025).sc_inv
    b = compute_metrics(pred / 3.0, gt, 0.025).sc_inv
    return abs(a - b) < 1e-6 and compute_metrics(gt / 2.0, gt, 0.025).sc_inv < 1e-6


def _identity_warp():
    feat = torch.randn(1, 3, 5, 6)
    K = torch.tensor([[[5.0, 0, 3], [0, 5.0, 2.5], [0, 0, 1]]])
    E = torch.eye(4).unsqueeze(0)
    warped, _ = plane_sweep_warp(feat, disparity_planes(0.1, 0.05, 4), CameraPair(K, E, K, E))
    return bool(torch.equal(warped, feat.unsqueeze(2).expand_as(warped)))


def _rescale_identity():
    d = torch.rand(1, 5, 6) + 0.1
    K = torch.tensor([[[5.0, 0, 3], [0, 5.0, 2.5], [0, 0, 1]]])
    E = torch.eye(4).unsqueeze(0)
    cams = CameraPair(K, E, K, E)
    coords, valid = correspondences(d, cams)
    d_star, ok = rescale_disparity(d, cams, coords, valid)
    return bool(torch.equal(d_star, d)) and bool(ok.all())


def _hull_values():
    d = torch.rand(1, 5, 6) * 0.3 + 0.1
    K = torch.tensor([[[5.0, 0, 3], [0, 5.0, 2.5], [0, 0, 1]]])
    E = torch.eye(4).unsqueeze(0)
    h = cv.visual_hull([d, d * 0.5], [(K, E), (K, E)], disparity_planes(0.05, 0.05, 8), (K, E))
    return set(torch.unique(h).tolist()) <= {0.0, 0.5, 1.0}


def _mean_pool_degeneracy():
    torch.manual_seed(0)
    aam = AAM(2)
    with torch.no_grad():
        aam.w_others.weight.copy_(aam.w_self.weight)
        aam.w_others.bias.copy_(aam.w_self.bias)
    vols = [torch.randn(1, 2, 3, 4, 4) for _ in range(3)]
    return bool(torch.allclose(aam(vols), mean_pool_aggregate(vols), atol=1e-6, rtol=0))


def _pfm_roundtrip():
    data = np.random.default_rng(2).random((5, 7)).astype(np.float32)
    with tempfile.TemporaryDirectory() as tmp:
        p = Path(tmp) / "x.pfm"
        write_pfm(p, data)
        header_ok = p.read_bytes().startswith(b"Pf\n7 5\n-1.0\n")
        return header_ok and np.array_equal(read_pfm(p), data)


def _checkpoint_roundtrip():
    torch.manual_seed(0)
    net = TwoViewNet(NetworkConfig(), zero_init=False)
    ck = checkpoint_from_two_view(net, disparity_planes(0.1, 0.025, 16))
    with tempfile.TemporaryDirectory() as tmp:
        ck.save(Path(tmp) / "c.ckpt")
        back = Checkpoint.load(Path(tmp) / "c.ckpt")
    return all(torch.equal(ck.state[k], back.state[k]) for k in ck.state) and set(ck.state) == set(back.state)


def _fronto_plane():
    spec = SceneSpec(
        seed=0,
        primitives=[Primitive("plane", "wall", np.array([0.0, 0.0, 4.0]), normal=np.array([0.0, 0.0, -1.0]))],
        intrinsics=default_intrinsics((16, 16)), ref_pose=np.eye(4), src_poses=[], image_size=(16, 16),
    )
    s = generate_scene(spec)
    return bool(np.allclose(s.disparities[0], 0.25, atol=1e-7, rtol=0))


def _fusion_identity():
    cam = CameraModel(default_intrinsics((8, 8)), np.eye(4), (8, 8))
    E = np.eye(4)
    E[0, 3] = -0.5
    cams = [cam, CameraModel(default_intrinsics((8, 8)), E, (8, 8))]
    maps = np.random.default_rng(3).uniform(0.1, 0.5, (2, 8, 8))
    f = consistency_filter(maps, cams, min_consistent_views=0, disp_tolerance=1e-3)
    return bool(f.masks.all()) and np.array_equal(f.maps, maps)


CHECKS: dict[str, Callable[[], bool]] = {
    "l1 loss of exact prediction is 0 and of a +0.5 offset is 0.5": _l1_identity,
    "total loss with unit errors is 1.8, refined-only 0.8": _total_loss_arithmetic,
    "learning rate decays once after the decay interval": _lr_schedule,
    "metrics of a perfect prediction are zero / 100%": _metrics_perfect,
    "Sc-inv ignores global depth scale": _sc_inv_scale,
    "identical cameras warp features unchanged": _identity_warp,
    "identical cameras leave disparity rescaling unchanged": _rescale_identity,
    "two-view hull takes values in {0, 0.5, 1}": _hull_values,
    "tied aggregation weights reduce to mean pooling": _mean_pool_degeneracy,
    "PFM round-trip with little-endian header": _pfm_roundtrip,
    "checkpoint round-trip is bit-exact": _checkpoint_roundtrip,
    "fronto-parallel plane has constant disparity": _fronto_plane,
    "zero required views keeps every pixel": _fusion_identity,
}


def run_selftest() -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in CHECKS.items():
        try:
            results.append((name, bool(fn()), ""))
        except Exception as exc:  # report, keep going
            results.append((name, False, f"{type(exc).__name__}: {exc}"))
    return results
