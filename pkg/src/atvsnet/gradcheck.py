"""Finite-difference gradient checks for the differentiable building blocks.

Every suite runs in double precision with central differences of step 1e-5 on
a random linear functional of the output. The error of a suite is
``max |g_fd - g_autograd| / max |g_autograd|`` over the probed entries.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch
from torch import Tensor
from torch.func import functional_call

from atvsnet.aggregation import AAM
from atvsnet.geometry import CameraPair, bilinear_sample, disparity_planes, plane_sweep_warp
from atvsnet.networks import NetworkConfig, OutputModule, RefinementNet, refine_forward
from atvsnet.training import LossWeights, total_loss

STEP = 1e-5
TOLERANCE = 1e-4
MAX_PROBES = 48


@dataclass
class GradcheckResult:
    name: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def fd_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], seed: int = 0, probes: int = MAX_PROBES) -> float:
    """Compare autograd with central differences for ``sum(w * fn(*inputs))``."""
    gen = torch.Generator().manual_seed(seed)
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    w = torch.randn(out.shape, generator=gen, dtype=out.dtype)
    grads = torch.autograd.grad((w * out).sum(), inputs, allow_unused=True)
    worst_abs, scale = 0.0, 0.0
    with torch.no_grad():
        for x, g in zip(inputs, grads):
            g = torch.zeros_like(x) if g is None else g
            flat, gflat = x.view(-1), g.reshape(-1)
            n = flat.numel()
            idx = torch.randperm(n, generator=gen)[:probes] if n > probes else torch.arange(n)
            for i in idx.tolist():
                orig = flat[i].item()
                flat[i] = orig + STEP
                f_plus = (w * fn(*inputs)).sum().item()
                flat[i] = orig - STEP
                f_minus = (w * fn(*inputs)).sum().item()
                flat[i] = orig
                num = (f_plus - f_minus) / (2 * STEP)
                worst_abs = max(worst_abs, abs(num - gflat[i].item()))
                scale = max(scale, abs(gflat[i].item()))
    return worst_abs / max(scale, 1e-12)


def _camera_pair(B: int = 1) -> CameraPair:
    K = torch.tensor([[6.0, 0, 3.5], [0, 6.0, 3.5], [0, 0, 1]], dtype=torch.float64).expand(B, 3, 3)
    E_ref = torch.eye(4, dtype=torch.float64).expand(B, 4, 4)
    E_src = torch.eye(4, dtype=torch.float64).clone()
    c, s = torch.cos(torch.tensor(0.05)), torch.sin(torch.tensor(0.05))
    E_src[0, 0], E_src[0, 2], E_src[2, 0], E_src[2, 2] = c, s, -s, c
    E_src[:3, 3] = torch.tensor([-0.6, 0.05, 0.02])
    return CameraPair(K, E_ref, K, E_src.expand(B, 4, 4))


def suite_bilinear(seed: int = 0) -> float:
    g = torch.Generator().manual_seed(seed)
    image = torch.randn(1, 2, 6, 7, generator=g, dtype=torch.float64)
    # keep away from integer coordinates where the sampler has kinks
    coords = torch.rand(1, 4, 5, 2, generator=g, dtype=torch.float64) * torch.tensor([5.0, 4.0]) + 0.3
    coords = torch.floor(coords) + 0.1 + 0.8 * torch.frac(coords)
    return fd_check(lambda im, c: bilinear_sample(im, c)[0], [image, coords], seed)


def suite_plane_sweep(seed: int = 0) -> float:
    g = torch.Generator().manual_seed(seed)
    feat = torch.randn(1, 3, 8, 8, generator=g, dtype=torch.float64)
    planes = disparity_planes(0.1, 0.05, 4)
    cams = _camera_pair()
    return fd_check(lambda f: plane_sweep_warp(f, planes, cams)[0], [feat], seed)


def suite_soft_argmax(seed: int = 0) -> float:
    torch.manual_seed(seed)
    planes = disparity_planes(0.1, 0.025, 6)
    head = OutputModule(3).double()
    vol = torch.randn(1, 3, 6, 4, 4, dtype=torch.float64)
    params = list(head.parameters())

    def fn(v, *ps):
        return _with_params(head, ps, v, planes)[1]

    return fd_check(fn, [vol, *params], seed)


def suite_refinement(seed: int = 0) -> float:
    torch.manual_seed(seed)
    cfg = NetworkConfig(low_level_channels=2, cost_channels=2, plane_count=8)
    net = RefinementNet(cfg).double()
    extra = cfg.refine_in_channels - cfg.cost_channels
    filtered = torch.randn(1, cfg.cost_channels, 8, 8, 8, dtype=torch.float64)
    guide = torch.randn(1, extra, 8, 8, 8, dtype=torch.float64)
    params = [p for p in net.parameters()]

    def fn(f, gd, *ps):
        names = [n for n, _ in net.named_parameters()]
        return refine_forward(lambda x: functional_call(net, dict(zip(names, ps)), (x,)), f, [gd])

    return fd_check(fn, [filtered, guide, *params], seed, probes=24)


def suite_aam(seed: int = 0) -> float:
    torch.manual_seed(seed)
    aam = AAM(2).double()
    vols = torch.randn(3, 1, 2, 3, 4, 4, dtype=torch.float64)
    params = list(aam.parameters())

    def fn(v, *ps):
        return _with_params(aam, ps, list(v))

    return fd_check(fn, [vols, *params], seed)


def suite_total_loss(seed: int = 0) -> float:
    g = torch.Generator().manual_seed(seed)
    gt = torch.rand(2, 5, 5, generator=g, dtype=torch.float64) + 0.1
    gt[0, :2] = 0.0  # invalid pixels
    preds = [gt + 0.3 * torch.randn(gt.shape, generator=g, dtype=torch.float64) for _ in range(4)]
    w = LossWeights()
    return fd_check(lambda r, a, b, c: total_loss(r, [a, b, c], gt, w), preds, seed)


def _with_params(module: torch.nn.Module, tensors, *args, **kwargs):
    """Call ``module`` with ``tensors`` substituted for its parameters, in order."""
    names = [n for n, _ in module.named_parameters()]
    return functional_call(module, dict(zip(names, tensors)), args, kwargs)


SUITES = {
    "bilinear_sample": suite_bilinear,
    "plane_sweep_warp": suite_plane_sweep,
    "soft_argmax_output": suite_soft_argmax,
    "refinement_residual": suite_refinement,
    "aam_aggregate": suite_aam,
    "total_loss": suite_total_loss,
}


def run_all(seed: int = 0) -> list[GradcheckResult]:
    return [GradcheckResult(name, fn(seed)) for name, fn in SUITES.items()]
