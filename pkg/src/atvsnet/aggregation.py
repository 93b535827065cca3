"""Order-invariant fusion of cost volumes and the multi-view network built on it."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn
from torch import Tensor

from atvsnet import cost_volumes as cv
from atvsnet.geometry import CameraPair, DisparityHypotheses, scale_intrinsics
from atvsnet.networks import FEATURE_SCALE, NetworkConfig, TwoViewNet, refine_forward

AGGREGATORS = ("none", "mean", "attsets", "aam")


def _check_set(volumes: Sequence[Tensor]) -> None:
    if len(volumes) == 0:
        raise ValueError("cannot aggregate an empty set of volumes")
    shape = volumes[0].shape
    for v in volumes[1:]:
        if v.shape != shape:
            raise ValueError(f"volume shapes differ: {tuple(shape)} vs {tuple(v.shape)}")


def mean_pool_aggregate(volumes: Sequence[Tensor]) -> Tensor:
    _check_set(volumes)
    return torch.stack(list(volumes)).mean(dim=0)


def set_softmax(scores: Tensor) -> Tensor:
    """Softmax over the leading set axis, independently per element."""
    return torch.softmax(scores, dim=0)


def weighted_set_sum(volumes: Tensor, scores: Tensor) -> Tensor:
    """``sum_n volumes[n] * softmax(scores)[n]`` with the set on dim 0."""
    return (volumes * set_softmax(scores)).sum(dim=0)


def _conv(channels: int) -> nn.Conv3d:
    return nn.Conv3d(channels, channels, 3, 1, 1)


def _apply_conv(conv: nn.Conv3d, stacked: Tensor) -> Tensor:
    N, B = stacked.shape[:2]
    return conv(stacked.flatten(0, 1)).reshape(N, B, *stacked.shape[2:])


class MeanPool(nn.Module):
    def forward(self, volumes: Sequence[Tensor]) -> Tensor:
        return mean_pool_aggregate(volumes)


class AttSets(nn.Module):
    """Attention scores from a single shared activation per element."""

    def __init__(self, channels: int, zero_init: bool = False):
        super().__init__()
        self.conv = _conv(channels)
        if zero_init:
            nn.init.zeros_(self.conv.weight)
            nn.init.zeros_(self.conv.bias)

    def forward(self, volumes: Sequence[Tensor]) -> Tensor:
        _check_set(volumes)
        stacked = torch.stack(list(volumes))
        return weighted_set_sum(stacked, _apply_conv(self.conv, stacked))


class AAM(nn.Module):
    """Attentional aggregation with a self activation and a shared cross activation.

    The activated element is ``f(C_n, W_self) + sum_{m != n} f(C_m, W_others)``
    with ``f`` a channel-preserving 3x3x3 convolution; the output is the
    per-element softmax-weighted sum of the inputs.
    """

    def __init__(self, channels: int, zero_init: bool = False):
        super().__init__()
        self.w_self = _conv(channels)
        self.w_others = _conv(channels)
        if zero_init:
            for conv in (self.w_self, self.w_others):
                nn.init.zeros_(conv.weight)
                nn.init.zeros_(conv.bias)

    def activate(self, volumes: Sequence[Tensor]) -> Tensor:
        """Activated set, stacked on dim 0."""
        _check_set(volumes)
        stacked = torch.stack(list(volumes))
        own = _apply_conv(self.w_self, stacked)
        cross = _apply_conv(self.w_others, stacked)
        # sum over m != n as total minus own term; tied weights give identical rows
        return cross.sum(dim=0, keepdim=True) + (own - cross)

    def forward(self, volumes: Sequence[Tensor]) -> Tensor:
        act = self.activate(volumes)
        return weighted_set_sum(torch.stack(list(volumes)), act)


def make_aggregator(kind: str, channels: int, zero_init: bool = True) -> nn.Module | None:
    if kind == "none":
        return None
    if kind == "mean":
        return MeanPool()
    if kind == "attsets":
        return AttSets(channels, zero_init)
    if kind == "aam":
        return AAM(channels, zero_init)
    raise ValueError(f"unknown aggregator {kind!r}; expected one of {AGGREGATORS}")


class ATVSNet(nn.Module):
    """N shared two-view branches joined by two aggregation points.

    ``aam1`` fuses the reference filtered volumes after cost regularization and
    the fused volume is handed back to every branch; ``aam2`` fuses the refined
    volumes before the single final output module.
    """

    def __init__(
        self,
        cfg: NetworkConfig | None = None,
        aam1: str = "aam",
        aam2: str = "aam",
        two_view: TwoViewNet | None = None,
        branch_mode: str = "sequential",
    ):
        super().__init__()
        self.two_view = two_view if two_view is not None else TwoViewNet(cfg)
        self.cfg = self.two_view.cfg
        if aam2 == "none":
            raise ValueError("the second aggregation point must fuse the branches")
        if branch_mode not in ("sequential", "batched"):
            raise ValueError("branch_mode must be 'sequential' or 'batched'")
        self.aam1_kind, self.aam2_kind = aam1, aam2
        c = self.cfg.cost_channels
        self.aam1 = make_aggregator(aam1, c)
        self.aam2 = make_aggregator(aam2, c)
        self.branch_mode = branch_mode

    def aggregation_parameters(self):
        for m in (self.aam1, self.aam2):
            if m is not None:
                yield from m.parameters()

    def _groups(self, n: int) -> list[list[int]]:
        if self.branch_mode == "batched":
            return [list(range(n))]
        return [[i] for i in range(n)]

    def _initial_pass(self, f_high, idx, K, E, planes):
        """Both matching directions for the branches ``idx``; returns per-branch lists."""
        B = f_high.shape[0]
        f_ref = torch.cat([f_high[:, 0]] * len(idx) + [f_high[:, n + 1] for n in idx])
        f_other = torch.cat([f_high[:, n + 1] for n in idx] + [f_high[:, 0]] * len(idx))
        K_r = torch.cat([K[:, 0]] * len(idx) + [K[:, n + 1] for n in idx])
        E_r = torch.cat([E[:, 0]] * len(idx) + [E[:, n + 1] for n in idx])
        K_s = torch.cat([K[:, n + 1] for n in idx] + [K[:, 0]] * len(idx))
        E_s = torch.cat([E[:, n + 1] for n in idx] + [E[:, 0]] * len(idx))
        filtered, disps, prob = self.two_view.initial(f_ref, f_other, CameraPair(K_r, E_r, K_s, E_s), planes)
        k = len(idx)
        split = lambda x: list(x.split(B))  # noqa: E731
        return {
            "filtered_ref": split(filtered[: k * B]),
            "disp_ref": split(disps[-1][: k * B]),
            "disp_src": split(disps[-1][k * B :]),
            "intermediates": [split(d[: k * B]) for d in disps],
        }

    def branch_volumes(self, images: Tensor, K: Tensor, E: Tensor, planes: DisparityHypotheses) -> dict:
        """Everything up to (not including) the second aggregation point.

        ``images`` (B, N+1, 3, H, W) with the reference first; ``K``/``E`` are
        full-resolution cameras (B, N+1, 3, 3) / (B, N+1, 4, 4).
        """
        B, V = images.shape[:2]
        N = V - 1
        if N < 1:
            raise ValueError("at least one source view is required")
        Kf = scale_intrinsics(K, FEATURE_SCALE)
        f_high, f_low = self.two_view.features(images.flatten(0, 1))
        f_high = f_high.reshape(B, V, *f_high.shape[1:])
        f_low = f_low.reshape(B, V, *f_low.shape[1:])

        init = {"filtered_ref": [], "disp_ref": [], "disp_src": [], "intermediates": None}
        for group in self._groups(N):
            part = self._initial_pass(f_high, group, Kf, E, planes)
            for key in ("filtered_ref", "disp_ref", "disp_src"):
                init[key].extend(part[key])
            if init["intermediates"] is None:
                init["intermediates"] = part["intermediates"]
            else:
                for acc, new in zip(init["intermediates"], part["intermediates"]):
                    acc.extend(new)

        if self.aam1 is not None:
            fused = self.aam1(init["filtered_ref"])
            _, d_fused = self.two_view.output(fused, planes)
            filtered_in = [fused] * N
            d_ref_in = [d_fused] * N
        else:
            fused, d_fused = None, None
            filtered_in = init["filtered_ref"]
            d_ref_in = init["disp_ref"]

        src_cams = [(Kf[:, n + 1], E[:, n + 1]) for n in range(N)]
        ref_cam = (Kf[:, 0], E[:, 0])
        refined = [None] * N
        if self.cfg.use_refinement:
            hull_cache = {}
            for group in self._groups(N):
                guides, bases = [], []
                for n in group:
                    hull = None
                    if self.cfg.use_hull:
                        key = id(d_ref_in[n])
                        if key not in hull_cache:
                            d_ref = d_ref_in[n].detach() if self.cfg.detach_guidance else d_ref_in[n]
                            maps = [d_ref] + [d.detach() if self.cfg.detach_guidance else d for d in init["disp_src"]]
                            hull_cache[key] = cv.visual_hull(maps, [ref_cam] + src_cams, planes, ref_cam)
                        hull = hull_cache[key]
                    cams = CameraPair(Kf[:, 0], E[:, 0], Kf[:, n + 1], E[:, n + 1])
                    guides.append(
                        self.two_view.guidance(
                            d_ref_in[n], init["disp_src"][n], f_low[:, 0], f_low[:, n + 1], cams, planes, hull=hull
                        )
                    )
                    bases.append(filtered_in[n])
                stacked_guides = [torch.cat(parts) for parts in zip(*guides)]
                out = refine_forward(self.two_view.refine, torch.cat(bases), stacked_guides)
                for j, n in enumerate(group):
                    refined[n] = out[j * B : (j + 1) * B]
        else:
            refined = list(filtered_in)
        return {
            "refined_volumes": refined,
            "filtered_ref": init["filtered_ref"],
            "fused_filtered": fused,
            "disp_ref_fused": d_fused,
            "disp_ref": init["disp_ref"],
            "disp_src": init["disp_src"],
            "intermediates": init["intermediates"],
        }

    def aggregate_output(self, refined_volumes: Sequence[Tensor], planes: DisparityHypotheses):
        fused = self.aam2(refined_volumes)
        prob, d = self.two_view.output(fused, planes)
        return fused, prob, d

    def forward(self, images: Tensor, K: Tensor, E: Tensor, planes: DisparityHypotheses) -> dict:
        out = self.branch_volumes(images, K, E, planes)
        fused, prob, d = self.aggregate_output(out["refined_volumes"], planes)
        out.update(refined=d, prob_refined=prob, fused_refined=fused)
        return out


def atvsnet_forward(model: ATVSNet, ref_image: Tensor, sources: Sequence[tuple[Tensor, tuple[Tensor, Tensor]]],
                    ref_camera: tuple[Tensor, Tensor], planes: DisparityHypotheses) -> Tensor:
    """Final reference disparity (B, h, w) from a reference image and ``(image, (K, E))`` sources."""
    if len(sources) == 0:
        raise ValueError("at least one source view is required")
    images = torch.stack([ref_image] + [img for img, _ in sources], dim=1)
    K = torch.stack([ref_camera[0]] + [cam[0] for _, cam in sources], dim=1)
    E = torch.stack([ref_camera[1]] + [cam[1] for _, cam in sources], dim=1)
    return model(images, K, E, planes)["refined"]
