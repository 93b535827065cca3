"""Pinhole cameras, plane hypotheses and differentiable plane-sweep warping.

Conventions used throughout the package:

* pixel coordinates are ``(x, y)`` with ``x`` along the image width and the
  centre of pixel ``(0, 0)`` at coordinate ``(0, 0)``;
* disparity is the reciprocal of the Z-depth in a camera's own frame;
* tensors are batched and channels-first: images ``(B, C, H, W)``, disparity
  maps ``(B, H, W)`` and volumes ``(B, C, D, H, W)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import Tensor

# Minimum Z component accepted before dividing in rescaling and projection.
Z_EPS = 1e-8
# Coordinate written for invalid projections; far enough outside that bilinear
# sampling with zero padding returns exactly zero.
OUTSIDE = -16.0


@dataclass
class CameraModel:
    """A pinhole camera: intrinsics, world-to-camera pose and image size.

    ``image_size`` is ``(width, height)`` in pixels.
    """

    intrinsics: np.ndarray
    world_to_cam: np.ndarray
    image_size: tuple[int, int]

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        self.world_to_cam = np.asarray(self.world_to_cam, dtype=np.float64).reshape(4, 4)
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))
        K = self.intrinsics
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("intrinsics must have positive focal lengths")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0:
            raise ValueError("intrinsics must be upper-triangular")
        R = self.world_to_cam[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("world_to_cam rotation block must be orthonormal with det +1")
        if not np.allclose(self.world_to_cam[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("world_to_cam must be a homogeneous rigid transform")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_cam[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_cam[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    def projection_matrix(self) -> np.ndarray:
        """4x4 matrix ``[[K, 0], [0, 1]] @ world_to_cam``."""
        P = np.eye(4)
        P[:3, :3] = self.intrinsics
        return P @ self.world_to_cam

    def scaled(self, scale: int) -> "CameraModel":
        """Camera for an image downsampled by ``scale`` (focal and principal point divided)."""
        K = self.intrinsics.copy()
        K[:2] /= scale
        w, h = self.image_size
        return CameraModel(K, self.world_to_cam.copy(), (math.ceil(w / scale), math.ceil(h / scale)))


@dataclass(frozen=True)
class DisparityHypotheses:
    """Fronto-parallel disparity planes ``d_i = d_min + i * delta`` for ``i = 1..count``."""

    d_min: float
    delta: float
    count: int
    values: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"plane interval must be positive, got {self.delta}")
        if int(self.count) != self.count or self.count < 1:
            raise ValueError(f"plane count must be a positive integer, got {self.count}")
        if self.d_min < 0:
            raise ValueError(f"minimum disparity must be non-negative, got {self.d_min}")
        vals = self.d_min + np.arange(1, int(self.count) + 1, dtype=np.float64) * self.delta
        object.__setattr__(self, "values", vals)

    @property
    def lowest(self) -> float:
        return float(self.values[0])

    @property
    def highest(self) -> float:
        return float(self.values[-1])

    @property
    def span(self) -> float:
        """Full hypothesis range ``count * delta``."""
        return self.count * self.delta

    def tensor(self, dtype=torch.float32, device=None) -> Tensor:
        return torch.as_tensor(self.values, dtype=dtype, device=device)

    def reversed_values(self) -> np.ndarray:
        return self.values[::-1].copy()


def disparity_planes(d_min: float, delta: float, D: int) -> DisparityHypotheses:
    """Return the ``D`` plane hypotheses ``d_min + i * delta``, ``i = 1..D``."""
    return DisparityHypotheses(float(d_min), float(delta), D)


def camera_tensors(cams: Sequence[CameraModel], dtype=torch.float32, device=None) -> tuple[Tensor, Tensor]:
    """Stack cameras into ``(B, 3, 3)`` intrinsics and ``(B, 4, 4)`` poses."""
    K = torch.as_tensor(np.stack([c.intrinsics for c in cams]), dtype=dtype, device=device)
    E = torch.as_tensor(np.stack([c.world_to_cam for c in cams]), dtype=dtype, device=device)
    return K, E


class CameraPair(NamedTuple):
    """Batched reference/source camera tensors: ``K`` (B, 3, 3), ``E`` (B, 4, 4)."""

    K_ref: Tensor
    E_ref: Tensor
    K_src: Tensor
    E_src: Tensor

    def swapped(self) -> "CameraPair":
        return CameraPair(self.K_src, self.E_src, self.K_ref, self.E_ref)

    def scaled(self, scale: float) -> "CameraPair":
        return CameraPair(scale_intrinsics(self.K_ref, scale), self.E_ref, scale_intrinsics(self.K_src, scale), self.E_src)

    def to(self, dtype) -> "CameraPair":
        return CameraPair(*(x.to(dtype) for x in self))

    @classmethod
    def from_models(cls, ref: CameraModel, src: CameraModel, dtype=torch.float32) -> "CameraPair":
        K_r, E_r = camera_tensors([ref], dtype)
        K_s, E_s = camera_tensors([src], dtype)
        return cls(K_r, E_r, K_s, E_s)


def scale_intrinsics(K: Tensor, scale: float) -> Tensor:
    K = K.clone()
    K[..., :2, :] = K[..., :2, :] / scale
    return K


def invert_rigid(E: Tensor) -> Tensor:
    R = E[..., :3, :3]
    t = E[..., :3, 3:]
    Rt = R.transpose(-1, -2)
    out = torch.zeros_like(E)
    out[..., :3, :3] = Rt
    out[..., :3, 3:] = -Rt @ t
    out[..., 3, 3] = 1.0
    return out


def relative_projection(K_ref: Tensor, E_ref: Tensor, K_src: Tensor, E_src: Tensor) -> tuple[Tensor, Tensor]:
    """Return ``(M, t)`` such that ``M @ (u, 1) + d * t`` is the source pixel of
    reference pixel ``u`` at disparity ``d``, in homogeneous form scaled by ``d``.

    The Z component of that vector is ``z_src * d``.
    """
    rel = E_src @ invert_rigid(E_ref)
    M = K_src @ rel[..., :3, :3] @ torch.linalg.inv(K_ref)
    t = (K_src @ rel[..., :3, 3:]).squeeze(-1)
    # identical cameras map exactly onto themselves
    same = (K_ref == K_src).flatten(-2).all(-1) & (E_ref == E_src).flatten(-2).all(-1)
    if same.any():
        eye = torch.eye(3, dtype=M.dtype, device=M.device).expand_as(M)
        M = torch.where(same[..., None, None], eye, M)
        t = torch.where(same[..., None], torch.zeros_like(t), t)
    return M, t


def pixel_grid(height: int, width: int, dtype=torch.float32, device=None) -> Tensor:
    """``(H, W, 2)`` grid of ``(x, y)`` pixel coordinates."""
    ys, xs = torch.meshgrid(
        torch.arange(height, dtype=dtype, device=device),
        torch.arange(width, dtype=dtype, device=device),
        indexing="ij",
    )
    return torch.stack([xs, ys], dim=-1)


def _apply(M: Tensor, t: Tensor, u: Tensor, d: Tensor) -> Tensor:
    # M, t batched as (B, 3, 3) / (B, 3); u (..., 2) broadcastable against d (B, ...)
    extra = d.dim() - 1
    Mb = M.reshape(M.shape[0], *([1] * extra), 3, 3)
    tb = t.reshape(t.shape[0], *([1] * extra), 3)
    uh = torch.cat([u, torch.ones_like(u[..., :1])], dim=-1)
    uh = uh.expand(*d.shape, 3)
    return (Mb @ uh.unsqueeze(-1)).squeeze(-1) + d.unsqueeze(-1) * tb


def project_with(M: Tensor, t: Tensor, u: Tensor, d: Tensor, eps: float = Z_EPS):
    """Project coordinates ``u`` at disparities ``d`` through ``(M, t)``.

    Returns ``(coords, z, valid)`` where ``z`` is the homogeneous Z component
    (``z_target * d``) and ``valid`` marks points in front of the target camera.
    Invalid coordinates are replaced by a far out-of-bounds constant.
    """
    p = _apply(M, t, u, d)
    z = p[..., 2]
    valid = z > eps * torch.clamp(d, min=eps)
    safe = torch.where(valid, z, torch.ones_like(z))
    coords = p[..., :2] / safe.unsqueeze(-1)
    coords = torch.where(valid.unsqueeze(-1), coords, torch.full_like(coords, OUTSIDE))
    return coords, z, valid


def project_pixel(u, d, ref: CameraModel, src: CameraModel) -> tuple[Tensor, Tensor]:
    """Project reference pixel(s) ``u`` (..., 2) at disparity ``d`` into the source view.

    Works in double precision. Returns ``(coords, valid)`` where ``valid`` is
    false for points behind the source camera; coordinates may fall outside
    the source image.
    """
    u_t = torch.as_tensor(u, dtype=torch.float64)
    d_t = torch.as_tensor(d, dtype=torch.float64)
    if torch.any(d_t <= 0):
        raise ValueError("disparity must be positive")
    d_t = torch.broadcast_to(d_t, u_t.shape[:-1])
    K_r, E_r = camera_tensors([ref], dtype=torch.float64)
    K_s, E_s = camera_tensors([src], dtype=torch.float64)
    M, t = relative_projection(K_r, E_r, K_s, E_s)
    coords, _, valid = project_with(M, t, u_t, d_t.unsqueeze(0))
    return coords[0], valid[0]


def bilinear_sample(image: Tensor, coords: Tensor) -> tuple[Tensor, Tensor]:
    """Bilinearly sample ``image`` (B, C, H, W) at pixel ``coords`` (B, *S, 2).

    Returns ``(values, inside)`` with values ``(B, C, *S)`` and the in-bounds mask
    ``(B, *S)``. Neighbours outside the image contribute zero. Integer
    coordinates reproduce pixel values exactly.
    """
    B, C, H, W = image.shape
    shape = coords.shape[1:-1]
    x = coords[..., 0].reshape(B, 1, -1)
    y = coords[..., 1].reshape(B, 1, -1)
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    wx1 = x - x0
    wy1 = y - y0
    wx0 = 1.0 - wx1
    wy0 = 1.0 - wy1
    flat = image.reshape(B, C, H * W)
    P = x.shape[-1]

    def tap(xi, yi):
        ok = (xi >= 0) & (xi <= W - 1) & (yi >= 0) & (yi <= H - 1)
        idx = (yi.clamp(0, H - 1) * W + xi.clamp(0, W - 1)).long()
        v = torch.gather(flat, 2, idx.expand(B, C, P))
        return v * ok.to(v.dtype)

    out = (
        tap(x0, y0) * (wx0 * wy0)
        + tap(x0 + 1, y0) * (wx1 * wy0)
        + tap(x0, y0 + 1) * (wx0 * wy1)
        + tap(x0 + 1, y0 + 1) * (wx1 * wy1)
    )
    xs, ys = coords[..., 0], coords[..., 1]
    inside = (xs >= 0) & (xs <= W - 1) & (ys >= 0) & (ys <= H - 1)
    return out.reshape(B, C, *shape), inside


def plane_sweep_warp(
    feat: Tensor,
    planes: DisparityHypotheses,
    cams: CameraPair,
) -> tuple[Tensor, Tensor]:
    """Warp source features onto every reference-frustum plane.

    Intrinsics must already match the feature resolution. Returns the warped
    volume ``(B, C, D, H, W)`` and its validity mask ``(B, 1, D, H, W)``;
    invalid samples are zero.
    """
    B, C, H, W = feat.shape
    d = planes.tensor(feat.dtype, feat.device)
    M, t = relative_projection(*cams.to(feat.dtype))
    u = pixel_grid(H, W, feat.dtype, feat.device)
    dd = d.reshape(1, -1, 1, 1).expand(B, -1, H, W)
    coords, _, front = project_with(M, t, u, dd)
    values, inside = bilinear_sample(feat, coords)
    mask = (front & inside).unsqueeze(1)
    values = values * mask.to(values.dtype)
    return values, mask


def rescale_disparity(
    d_src: Tensor,
    cams: CameraPair,
    coords: Tensor,
    valid: Tensor,
    eps: float = Z_EPS,
) -> tuple[Tensor, Tensor]:
    """Source disparity sampled at ``coords`` and re-expressed in reference scale.

    ``coords``/``valid`` are the per-reference-pixel source correspondences from
    projection. The sampled value ``d_s`` at source pixel ``u'`` becomes
    ``d_s / [P_ref P_src^-1 (u', 1, d_s)]_Z``, i.e. one over the reference-frame
    depth of that source point. Returns ``(d_star, valid)``; invalid pixels are 0.
    """
    sampled, inside = bilinear_sample(d_src.unsqueeze(1), coords)
    sampled = sampled.squeeze(1)
    M, t = relative_projection(*cams.swapped())
    p = _apply(M, t, coords, sampled)
    z = p[..., 2]
    ok = valid & inside & (sampled > 0) & (z > eps)
    d_star = torch.where(ok, sampled / torch.where(ok, z, torch.ones_like(z)), torch.zeros_like(z))
    return d_star, ok


def correspondences(d_ref: Tensor, cams: CameraPair) -> tuple[Tensor, Tensor]:
    """Source coordinates of every reference pixel at its own disparity ``d_ref``."""
    B, H, W = d_ref.shape
    M, t = relative_projection(*cams)
    u = pixel_grid(H, W, d_ref.dtype, d_ref.device)
    coords, _, valid = project_with(M, t, u, d_ref)
    return coords, valid & (d_ref > 0)
