"""Cross-view consistency filtering of disparity maps and point-cloud fusion."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from atvsnet.cost_volumes import geometric_error
from atvsnet.geometry import CameraModel, CameraPair, bilinear_sample, correspondences
from atvsnet.io import write_ply


class EmptyCloudWarning(UserWarning):
    pass


@dataclass
class PointCloud:
    points: np.ndarray  # (P, 3) float64
    colors: np.ndarray  # (P, 3) uint8

    def __len__(self) -> int:
        return len(self.points)

    def write(self, path) -> None:
        if len(self) == 0:
            warnings.warn("writing an empty point cloud", EmptyCloudWarning, stacklevel=2)
        write_ply(path, self.points, self.colors)


@dataclass
class FilterResult:
    masks: np.ndarray  # (V, H, W) surviving pixels
    agreement: np.ndarray  # (V, V, H, W); agreement[r, s] marks pixels of r confirmed by s
    maps: np.ndarray  # disparities with rejected pixels set to 0


def default_min_views(num_views: int) -> int:
    return 1 if num_views == 2 else 2


def _pair(cams: Sequence[CameraModel], r: int, s: int) -> CameraPair:
    return CameraPair.from_models(cams[r], cams[s], dtype=torch.float64)


def consistency_filter(
    disparities,
    cameras: Sequence[CameraModel],
    min_consistent_views: int | None = None,
    disp_tolerance: float = 0.025,
) -> FilterResult:
    """Keep a pixel when at least ``min_consistent_views`` other views agree with it.

    Two views agree at a pixel when the reference-scale difference between the
    pixel's disparity and the other view's reprojected disparity is below
    ``disp_tolerance``. A minimum of 0 keeps every valid pixel.
    """
    maps = np.asarray(disparities, dtype=np.float64)
    V = len(maps)
    if V < 2 or len(cameras) != V:
        raise ValueError("consistency filtering needs at least two views with one camera each")
    if min_consistent_views is None:
        min_consistent_views = default_min_views(V)
    if min_consistent_views < 0:
        raise ValueError("min_consistent_views must be non-negative")
    t = torch.from_numpy(maps)
    agreement = np.zeros((V, V) + maps.shape[1:], dtype=bool)
    for r in range(V):
        for s in range(V):
            if s == r:
                continue
            err, ok = geometric_error(t[r : r + 1], t[s : s + 1], _pair(cameras, r, s))
            agreement[r, s] = (ok & (err[:, 0] < disp_tolerance))[0].numpy()
    valid = np.isfinite(maps) & (maps > 0)
    if min_consistent_views == 0:
        masks = valid
    else:
        masks = valid & (agreement.sum(axis=1) >= min_consistent_views)
    return FilterResult(masks=masks, agreement=agreement, maps=np.where(masks, maps, 0.0))


def back_project(cam: CameraModel, coords: np.ndarray, disp: np.ndarray) -> np.ndarray:
    """World points of pixel coordinates ``(P, 2)`` at disparities ``(P,)``."""
    uh = np.concatenate([coords, np.ones((len(coords), 1))], axis=1)
    x_cam = (uh @ np.linalg.inv(cam.intrinsics).T) / disp[:, None]
    return (x_cam - cam.translation) @ cam.rotation


def fuse_point_cloud(
    disparities,
    cameras: Sequence[CameraModel],
    images: np.ndarray,
    filtered: FilterResult,
) -> PointCloud:
    """Emit every surviving pixel, averaged with the source points that confirmed it.

    Each view contributes its own surviving pixels with colours from that view;
    the averaging set depends only on which views agree, so the result does not
    depend on the order of the views.
    """
    maps = np.asarray(disparities, dtype=np.float64)
    V, H, W = maps.shape
    t = torch.from_numpy(maps)
    ys, xs = np.mgrid[0:H, 0:W]
    pix = np.stack([xs, ys], axis=-1).astype(np.float64)
    all_pts, all_cols = [], []
    for r in range(V):
        m = filtered.masks[r]
        if not m.any():
            continue
        total = back_project(cameras[r], pix[m], maps[r][m])
        count = np.ones(int(m.sum()))
        for s in range(V):
            if s == r:
                continue
            agree = filtered.agreement[r, s][m]
            if not agree.any():
                continue
            coords, _ = correspondences(t[r : r + 1], _pair(cameras, r, s))
            d_s, _ = bilinear_sample(t[s : s + 1].unsqueeze(1), coords)
            c = coords[0].numpy()[m][agree]
            ds = d_s[0, 0].numpy()[m][agree]
            total[agree] += back_project(cameras[s], c, ds)
            count[agree] += 1
        all_pts.append(total / count[:, None])
        all_cols.append(np.asarray(images[r])[m])
    if not all_pts:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.uint8))
    return PointCloud(np.concatenate(all_pts), np.concatenate(all_cols).astype(np.uint8))


def fuse_views(disparities, cameras, images, min_consistent_views=None, disp_tolerance=0.025) -> PointCloud:
    filtered = consistency_filter(disparities, cameras, min_consistent_views, disp_tolerance)
    return fuse_point_cloud(disparities, cameras, images, filtered)


def depth_equivalent(delta: float, depth) -> np.ndarray:
    """Depth change produced by a disparity change of ``delta`` at ``depth`` (first order)."""
    return delta * np.asarray(depth) ** 2
