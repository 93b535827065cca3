"""Learned parts of the two-view stereo network.

FeatureExtractor  2-D CNN + spatial pyramid pooling, 1/4 resolution output
CostRegularizer   stacked 3-D hourglasses with skip connections between stacks
OutputModule      3-D conv to one channel, softmax over planes, soft-argmax
RefinementNet     3-D U-Net predicting a residual on the filtered cost volume
TwoViewNet        the above wired together for one reference/source pair
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from atvsnet import cost_volumes as cv
from atvsnet.geometry import CameraPair, DisparityHypotheses, bilinear_sample, plane_sweep_warp

FEATURE_SCALE = 4


@dataclass
class NetworkConfig:
    feature_channels: int = 8
    low_level_channels: int = 16
    plane_count: int = 16
    crm_stacks: int = 3
    spp_pool_sizes: tuple[int, ...] = (4, 8)
    base_width: int = 8
    cost_channels: int = 8
    use_refinement: bool = True
    # refinement guidance switches, used for ablations
    use_geometric: bool = True
    use_hull: bool = True
    detach_guidance: bool = True

    def __post_init__(self):
        self.spp_pool_sizes = tuple(int(s) for s in self.spp_pool_sizes)
        if self.crm_stacks < 1:
            raise ValueError("crm_stacks must be >= 1")
        sizes = [self.feature_channels, self.low_level_channels, self.plane_count, self.base_width, self.cost_channels]
        if any(s <= 0 for s in sizes) or any(s <= 0 for s in self.spp_pool_sizes):
            raise ValueError("all sizes must be positive")
        if self.feature_channels % 2:
            raise ValueError("feature_channels must be even")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spp_pool_sizes"] = list(self.spp_pool_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)

    @property
    def refine_in_channels(self) -> int:
        c = self.cost_channels + 2 * self.low_level_channels + self.low_level_channels
        if self.use_geometric:
            c += 2 + 1
        if self.use_hull:
            c += 1
        return c


def norm(channels: int) -> nn.Module:
    # per-channel, batch-independent; no running statistics
    return nn.GroupNorm(channels, channels)


def conv2d_bn(cin, cout, kernel=3, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, kernel, stride, kernel // 2, bias=False), norm(cout))


def conv3d_bn(cin, cout, kernel=3, stride=1):
    return nn.Sequential(nn.Conv3d(cin, cout, kernel, stride, kernel // 2, bias=False), norm(cout))


class ResidualBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = conv2d_bn(cin, cout, 3, stride)
        self.conv2 = conv2d_bn(cout, cout, 3, 1)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = conv2d_bn(cin, cout, 1, stride)

    def forward(self, x):
        out = self.conv2(F.relu(self.conv1(x)))
        skip = x if self.shortcut is None else self.shortcut(x)
        return out + skip


def pyramid_pool(x: Tensor, pool_sizes) -> list[Tensor]:
    """Average-pool ``x`` with each window size and upsample back to its resolution."""
    H, W = x.shape[-2:]
    out = []
    for s in pool_sizes:
        k = (min(s, H), min(s, W))
        pooled = F.avg_pool2d(x, k, stride=k, ceil_mode=True)
        out.append(F.interpolate(pooled, size=(H, W), mode="bilinear", align_corners=False))
    return out


class FeatureExtractor(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        w = cfg.base_width
        low = cfg.low_level_channels
        mid = 2 * w
        self.pool_sizes = cfg.spp_pool_sizes
        self.stem = nn.Sequential(
            conv2d_bn(3, w, 3, 2), nn.ReLU(),
            conv2d_bn(w, w), nn.ReLU(),
            conv2d_bn(w, w), nn.ReLU(),
        )
        self.layer1 = ResidualBlock(w, low, stride=2)
        self.layer2 = ResidualBlock(low, mid)
        self.layer3 = ResidualBlock(mid, mid)
        self.layer4 = ResidualBlock(mid, mid)
        self.branches = nn.ModuleList(
            nn.Sequential(conv2d_bn(mid, mid // 2, 1), nn.ReLU()) for _ in cfg.spp_pool_sizes
        )
        fused = mid + mid + len(cfg.spp_pool_sizes) * (mid // 2)
        self.fuse = nn.Sequential(
            conv2d_bn(fused, mid), nn.ReLU(),
            nn.Conv2d(mid, cfg.feature_channels, 1, bias=False),
        )

    def forward(self, image: Tensor) -> tuple[Tensor, Tensor]:
        """Return ``(f_high, f_low)``, both at 1/4 of the input resolution."""
        x = self.stem(image)
        f_low = self.layer1(x)
        x2 = self.layer2(F.relu(f_low))
        x4 = self.layer4(self.layer3(x2))
        pooled = [b(p) for b, p in zip(self.branches, pyramid_pool(x4, self.pool_sizes))]
        f_high = self.fuse(torch.cat([x2, x4, *pooled], dim=1))
        return f_high, f_low


def _up_to(x: Tensor, ref: Tensor) -> Tensor:
    return F.interpolate(x, size=ref.shape[-3:], mode="trilinear", align_corners=False)


class Hourglass3d(nn.Module):
    """Two-level 3-D encoder-decoder returning a residual and its mid-level features."""

    def __init__(self, c: int):
        super().__init__()
        self.down1 = nn.Sequential(conv3d_bn(c, 2 * c, 3, 2), nn.ReLU(), conv3d_bn(2 * c, 2 * c), nn.ReLU())
        self.down2 = nn.Sequential(conv3d_bn(2 * c, 2 * c, 3, 2), nn.ReLU(), conv3d_bn(2 * c, 2 * c), nn.ReLU())
        self.up1 = conv3d_bn(2 * c, 2 * c)
        self.up0 = nn.Conv3d(2 * c, c, 3, 1, 1)

    def forward(self, x: Tensor, prev_mid: Tensor | None = None) -> tuple[Tensor, Tensor]:
        e1 = self.down1(x)
        if prev_mid is not None:
            e1 = e1 + prev_mid
        e2 = self.down2(e1)
        mid = F.relu(self.up1(_up_to(e2, e1)) + e1)
        return self.up0(_up_to(mid, x)), mid


class OutputModule(nn.Module):
    """3-D conv to a single channel, softmax over planes and soft-argmax."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv3d(channels, 1, 3, 1, 1)

    def forward(self, volume: Tensor, planes: DisparityHypotheses) -> tuple[Tensor, Tensor]:
        logits = self.conv(volume).squeeze(1)
        return soft_argmax(logits, planes)


def soft_argmax(logits: Tensor, planes: DisparityHypotheses) -> tuple[Tensor, Tensor]:
    """Softmax over the plane axis (dim 1) and the expected disparity.

    Returns ``(P, d)`` with ``P`` (B, D, H, W) and ``d`` (B, H, W).
    """
    if logits.shape[1] != planes.count:
        raise ValueError(f"volume has {logits.shape[1]} planes, hypotheses have {planes.count}")
    prob = torch.softmax(logits, dim=1)
    d = planes.tensor(logits.dtype, logits.device).reshape(1, -1, 1, 1)
    # the expectation is a convex combination; the clamp only absorbs rounding
    return prob, (prob * d).sum(dim=1).clamp(float(d.min()), float(d.max()))


class CostRegularizer(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        c = cfg.cost_channels
        self.entry = nn.Sequential(
            conv3d_bn(2 * cfg.feature_channels, c), nn.ReLU(),
            conv3d_bn(c, c), nn.ReLU(),
        )
        self.stacks = nn.ModuleList(Hourglass3d(c) for _ in range(cfg.crm_stacks))
        # one output head per stack; the last one is the shared output module
        self.heads = nn.ModuleList(OutputModule(c) for _ in range(cfg.crm_stacks))

    def forward(self, cost: Tensor) -> tuple[Tensor, list[Tensor]]:
        x = self.entry(cost)
        mid = None
        intermediates = []
        for hg in self.stacks:
            res, mid = hg(x, mid)
            x = x + res
            intermediates.append(x)
        return x, intermediates

    @property
    def output(self) -> OutputModule:
        return self.heads[-1]


class RefinementNet(nn.Module):
    """Single 3-D U-Net mapping concatenated guidance to a cost residual."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        c = cfg.cost_channels
        self.in_channels = cfg.refine_in_channels
        self.entry = nn.Sequential(conv3d_bn(self.in_channels, c), nn.ReLU())
        self.body = Hourglass3d(c)

    def forward(self, inputs: Tensor) -> Tensor:
        if inputs.shape[1] != self.in_channels:
            raise ValueError(f"refinement expects {self.in_channels} channels, got {inputs.shape[1]}")
        x = self.entry(inputs)
        res, _ = self.body(x)
        return res


def refine_forward(net: RefinementNet, filtered: Tensor, guidance: list[Tensor]) -> Tensor:
    """``C^R = C~ + U-Net(concat(C~, guidance...))``."""
    shape = filtered.shape[2:]
    for g in guidance:
        if g.shape[0] != filtered.shape[0] or g.shape[2:] != shape:
            raise ValueError(f"guidance volume {tuple(g.shape)} does not match {tuple(filtered.shape)}")
    return filtered + net(torch.cat([filtered, *guidance], dim=1))


def zero_final_layers(module: nn.Module) -> None:
    """Zero the last convolution of every hourglass so residual paths start as identity."""
    for m in module.modules():
        if isinstance(m, Hourglass3d):
            nn.init.zeros_(m.up0.weight)
            nn.init.zeros_(m.up0.bias)


def upsample_disparity(d: Tensor, size: tuple[int, int], scale: int = FEATURE_SCALE) -> Tensor:
    """Bilinear upsampling of a (B, h, w) map: full-res pixel ``x`` reads coordinate ``x / scale``."""
    B, h, w = d.shape
    H, W = size
    ys = (torch.arange(H, dtype=d.dtype, device=d.device) / scale).clamp(max=h - 1)
    xs = (torch.arange(W, dtype=d.dtype, device=d.device) / scale).clamp(max=w - 1)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    coords = torch.stack([gx, gy], dim=-1).expand(B, H, W, 2)
    out, _ = bilinear_sample(d.unsqueeze(1), coords)
    return out.squeeze(1)


def downsample_disparity(gt: Tensor, scale: int = FEATURE_SCALE) -> Tensor:
    """Nearest-valid downsampling: pixel ``(i, j)`` takes ``gt[scale*i, scale*j]`` or,
    when that is invalid, the closest valid pixel within two pixels of it.

    Invalid means non-finite or <= 0; the result is 0 where nothing valid is found.
    """
    gt = torch.where(torch.isfinite(gt), gt, torch.zeros_like(gt)).clamp_min(0.0)
    B, H, W = gt.shape
    h, w = -(-H // scale), -(-W // scale)
    pad = 2
    padded = F.pad(gt, (pad, pad + scale, pad, pad + scale))
    offsets = sorted(
        ((dy, dx) for dy in range(-pad, pad + 1) for dx in range(-pad, pad + 1)),
        key=lambda o: (o[0] ** 2 + o[1] ** 2, o[0], o[1]),
    )
    out = torch.zeros(B, h, w, dtype=gt.dtype, device=gt.device)
    for dy, dx in offsets:
        y0, x0 = pad + dy, pad + dx
        cand = padded[:, y0 : y0 + scale * h : scale, x0 : x0 + scale * w : scale]
        out = torch.where((out <= 0) & (cand > 0), cand, out)
    return out


class TwoViewNet(nn.Module):
    """Shared two-view stereo network for one reference/source pair."""

    def __init__(self, cfg: NetworkConfig | None = None, zero_init: bool = True):
        super().__init__()
        self.cfg = cfg or NetworkConfig()
        self.fem = FeatureExtractor(self.cfg)
        self.crm = CostRegularizer(self.cfg)
        self.refine = RefinementNet(self.cfg)
        if zero_init:
            zero_final_layers(self)

    @property
    def output(self) -> OutputModule:
        return self.crm.output

    def features(self, images: Tensor) -> tuple[Tensor, Tensor]:
        return self.fem(images)

    def initial(self, f_ref: Tensor, f_src: Tensor, cams: CameraPair, planes: DisparityHypotheses):
        """CRM pass on the concatenation volume. ``cams`` at feature resolution.

        Returns ``(filtered, intermediate_disparities, prob)``.
        """
        warped, _ = plane_sweep_warp(f_src, planes, cams)
        cost = cv.concat_cost_volume(f_ref, warped)
        filtered, inter = self.crm(cost)
        disps = []
        prob = None
        for head, vol in zip(self.crm.heads, inter):
            prob, d = head(vol, planes)
            disps.append(d)
        return filtered, disps, prob

    def guidance(
        self,
        d_ref: Tensor,
        d_src: Tensor,
        f_low_ref: Tensor,
        f_low_src: Tensor,
        cams: CameraPair,
        planes: DisparityHypotheses,
        hull: Tensor | None = None,
    ) -> list[Tensor]:
        """Refinement inputs besides the filtered volume, in channel order
        ``V_p, V_g, e_p, e_g, H`` (geometric and hull terms subject to config)."""
        cfg = self.cfg
        if cfg.detach_guidance:
            d_ref, d_src = d_ref.detach(), d_src.detach()
        D = planes.count
        warped_low, _ = plane_sweep_warp(f_low_src, planes, cams)
        out = [cv.concat_cost_volume(f_low_ref, warped_low)]
        if cfg.use_geometric:
            out.append(cv.geometric_volume(d_ref, d_src, planes, cams))
        out.append(cv.tile_along_depth(cv.photometric_error(f_low_ref, f_low_src, d_ref, cams), D))
        if cfg.use_geometric:
            e_g, _ = cv.geometric_error(d_ref, d_src, cams, sentinel=cv.invalid_cost(planes))
            out.append(cv.tile_along_depth(e_g, D))
        if cfg.use_hull:
            if hull is None:
                hull = cv.visual_hull([d_ref, d_src], [(cams.K_ref, cams.E_ref), (cams.K_src, cams.E_src)], planes, (cams.K_ref, cams.E_ref))
            out.append(hull)
        return out

    def forward(self, img_ref: Tensor, img_src: Tensor, cams: CameraPair, planes: DisparityHypotheses) -> dict:
        """Run the pair in both directions and refine the reference volume.

        ``cams`` are full-resolution cameras. Returned disparities are at 1/4
        resolution: ``disp_ref`` / ``disp_src`` (initial), ``intermediates``,
        ``refined`` and the matching volumes.
        """
        B = img_ref.shape[0]
        fc = cams.scaled(FEATURE_SCALE)
        f_high, f_low = self.features(torch.cat([img_ref, img_src], dim=0))
        both = CameraPair(
            torch.cat([fc.K_ref, fc.K_src]), torch.cat([fc.E_ref, fc.E_src]),
            torch.cat([fc.K_src, fc.K_ref]), torch.cat([fc.E_src, fc.E_ref]),
        )
        f_other = torch.cat([f_high[B:], f_high[:B]])
        filtered, disps, prob = self.initial(f_high, f_other, both, planes)
        filtered_ref = filtered[:B]
        d_ref, d_src = disps[-1][:B], disps[-1][B:]
        out = {
            "filtered": filtered_ref,
            "disp_ref": d_ref,
            "disp_src": d_src,
            "intermediates": [d[:B] for d in disps],
            "prob_ref": prob[:B],
            "f_low_ref": f_low[:B],
            "f_low_src": f_low[B:],
        }
        if self.cfg.use_refinement:
            guide = self.guidance(d_ref, d_src, f_low[:B], f_low[B:], fc, planes)
            refined_vol = refine_forward(self.refine, filtered_ref, guide)
            prob_r, d_r = self.output(refined_vol, planes)
        else:
            refined_vol, prob_r, d_r = filtered_ref, prob[:B], d_ref
        out.update(refined_volume=refined_vol, refined=d_r, prob_refined=prob_r)
        return out
