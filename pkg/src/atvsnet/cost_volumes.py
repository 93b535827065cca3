"""Matching, photometric and geometric volumes fed to the stereo networks.

Volumes are ``(B, C, D, H, W)``; error maps are ``(B, C, H, W)``. Every
function here is pure.
"""

from __future__ import annotations

from typing import Sequence

import torch
from torch import Tensor

from atvsnet.geometry import (
    CameraPair,
    DisparityHypotheses,
    bilinear_sample,
    correspondences,
    pixel_grid,
    project_with,
    relative_projection,
    rescale_disparity,
)


def concat_cost_volume(f_ref: Tensor, f_src_warped: Tensor) -> Tensor:
    """Concatenate the reference features (tiled over planes) with the warped source volume."""
    if f_ref.dim() != 4 or f_src_warped.dim() != 5:
        raise ValueError("expected reference features (B, F, H, W) and a warped volume (B, F, D, H, W)")
    B, C, H, W = f_ref.shape
    if f_src_warped.shape[0] != B or f_src_warped.shape[1] != C or f_src_warped.shape[3:] != (H, W):
        raise ValueError(f"shape mismatch: {tuple(f_ref.shape)} vs {tuple(f_src_warped.shape)}")
    D = f_src_warped.shape[2]
    tiled = f_ref.unsqueeze(2).expand(B, C, D, H, W)
    return torch.cat([tiled, f_src_warped], dim=1)


def geometric_cost_ref(d_ref: Tensor, planes: DisparityHypotheses) -> Tensor:
    """``|d_ref(u) - d_i|`` for every plane, shape (B, 1, D, H, W)."""
    d = planes.tensor(d_ref.dtype, d_ref.device).reshape(1, -1, 1, 1)
    return (d_ref.unsqueeze(1) - d).abs().unsqueeze(1)


def invalid_cost(planes: DisparityHypotheses) -> float:
    """Penalty written where a projection is invalid: the full hypothesis range."""
    return planes.span


def reprojected_source_disparity(d_ref: Tensor, d_src: Tensor, cams: CameraPair) -> tuple[Tensor, Tensor]:
    """Source disparity at each reference pixel's correspondence, in reference scale."""
    coords, valid = correspondences(d_ref, cams)
    return rescale_disparity(d_src, cams, coords, valid)


def geometric_cost_source(d_ref: Tensor, d_src: Tensor, planes: DisparityHypotheses, cams: CameraPair) -> Tensor:
    """Geometric cost of the source view, ``|d*_src(pi(u, d_ref(u))) - d_i|``.

    Pixels without a valid source correspondence carry ``invalid_cost(planes)``
    at every plane.
    """
    d_star, ok = reprojected_source_disparity(d_ref, d_src, cams)
    d = planes.tensor(d_ref.dtype, d_ref.device).reshape(1, -1, 1, 1)
    cost = (d_star.unsqueeze(1) - d).abs()
    sentinel = torch.full_like(cost, invalid_cost(planes))
    return torch.where(ok.unsqueeze(1), cost, sentinel).unsqueeze(1)


def geometric_volume(d_ref: Tensor, d_src: Tensor, planes: DisparityHypotheses, cams: CameraPair) -> Tensor:
    """Two-channel geometric volume: reference cost then source cost."""
    return torch.cat([geometric_cost_ref(d_ref, planes), geometric_cost_source(d_ref, d_src, planes, cams)], dim=1)


def photometric_error(f_ref_low: Tensor, f_src_low: Tensor, d_ref: Tensor, cams: CameraPair) -> Tensor:
    """Per-channel ``|F_src(pi(u, d_ref(u))) - F_ref(u)|`` (B, C, H, W)."""
    coords, valid = correspondences(d_ref, cams)
    sampled, _ = bilinear_sample(f_src_low, coords)
    sampled = sampled * valid.unsqueeze(1).to(sampled.dtype)
    return (sampled - f_ref_low).abs()


def geometric_error(d_ref: Tensor, d_src: Tensor, cams: CameraPair, sentinel: float | None = None) -> tuple[Tensor, Tensor]:
    """``|d*_src(pi(u, d_ref(u))) - d_ref(u)|`` as (B, 1, H, W) plus its validity.

    Invalid pixels get ``sentinel`` (0 when not given).
    """
    d_star, ok = reprojected_source_disparity(d_ref, d_src, cams)
    err = (d_star - d_ref).abs()
    fill = torch.full_like(err, 0.0 if sentinel is None else sentinel)
    return torch.where(ok, err, fill).unsqueeze(1), ok


def tile_along_depth(e: Tensor, D: int) -> Tensor:
    """Repeat an error map ``D`` times along a new plane axis."""
    if D < 1:
        raise ValueError("D must be positive")
    B, C, H, W = e.shape
    return e.unsqueeze(2).expand(B, C, D, H, W)


def visual_hull(
    disparity_maps: Sequence[Tensor],
    cameras: Sequence[tuple[Tensor, Tensor]],
    planes: DisparityHypotheses,
    ref: tuple[Tensor, Tensor],
) -> Tensor:
    """Fraction of views whose estimated surface passes the step test at each voxel.

    Voxel ``(u, d_i)`` of the reference frustum is projected into view ``n``;
    its disparity is converted to that view's scale and compared with the view's
    map sampled at the projection. A view counts when the sampled disparity is
    at least the voxel's (``theta(0) = 1``). Projections outside the image or
    behind the camera count as zero. Returns (B, 1, D, H, W) in multiples of 1/N.
    """
    if len(disparity_maps) == 0:
        raise ValueError("visual hull needs at least one disparity map")
    if len(disparity_maps) != len(cameras):
        raise ValueError("one camera per disparity map is required")
    B, H, W = disparity_maps[0].shape
    dtype, device = disparity_maps[0].dtype, disparity_maps[0].device
    d = planes.tensor(dtype, device).reshape(1, -1, 1, 1).expand(B, -1, H, W)
    u = pixel_grid(H, W, dtype, device)
    count = torch.zeros_like(d)
    K_ref, E_ref = ref
    with torch.no_grad():
        for disp, (K, E) in zip(disparity_maps, cameras):
            M, t = relative_projection(K_ref.to(dtype), E_ref.to(dtype), K.to(dtype), E.to(dtype))
            coords, z, front = project_with(M, t, u, d)
            sampled, inside = bilinear_sample(disp.unsqueeze(1), coords)
            d_view = d / torch.where(front, z, torch.ones_like(z))
            passed = front & inside & (sampled[:, 0] - d_view >= 0)
            count = count + passed.to(dtype)
    return (count / len(disparity_maps)).unsqueeze(1)
