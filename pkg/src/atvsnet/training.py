"""Losses, the two-stage training loops and the checkpoint format."""

from __future__ import annotations

import copy
import json
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from atvsnet.aggregation import ATVSNet
from atvsnet.geometry import CameraPair, DisparityHypotheses, camera_tensors, disparity_planes
from atvsnet.networks import FEATURE_SCALE, NetworkConfig, TwoViewNet, downsample_disparity, refine_forward
from atvsnet.synthetic import MVSample

CKPT_MAGIC = b"ATVSCKPT"
CKPT_VERSION = 1
RMSPROP_DEFAULTS = {"alpha": 0.99, "eps": 1e-8, "momentum": 0.0, "weight_decay": 0.0}


class EmptyMaskWarning(UserWarning):
    """The ground truth had no valid pixel; the loss is defined as 0."""


def valid_mask(gt: Tensor) -> Tensor:
    return torch.isfinite(gt) & (gt > 0)


def l1_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Mean absolute error over pixels with valid ground truth."""
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and ground truth {tuple(gt.shape)} differ")
    mask = valid_mask(gt)
    n = int(mask.sum())
    if n == 0:
        warnings.warn("no valid ground-truth pixels; loss set to 0", EmptyMaskWarning, stacklevel=2)
        return (pred * 0).sum()
    # where() keeps the gradient exactly zero at invalid pixels
    diff = torch.where(mask, pred - torch.where(mask, gt, pred), torch.zeros_like(pred))
    return diff.abs().sum() / n


@dataclass
class LossWeights:
    refined: float = 0.8
    intermediate: tuple[float, ...] = (0.2, 0.3, 0.5)

    def __post_init__(self):
        self.intermediate = tuple(float(w) for w in self.intermediate)
        if self.refined < 0 or any(w < 0 for w in self.intermediate):
            raise ValueError("loss weights must be non-negative")


def total_loss(refined: Tensor, intermediates: Sequence[Tensor] | None, gt: Tensor, w: LossWeights) -> Tensor:
    """Weighted refined loss plus intermediate supervision.

    Passing ``intermediates=None`` disables the intermediate terms.
    """
    loss = w.refined * l1_loss(refined, gt)
    if intermediates is None:
        return loss
    if len(intermediates) != len(w.intermediate):
        raise ValueError(f"{len(intermediates)} intermediate outputs but {len(w.intermediate)} weights")
    for wk, dk in zip(w.intermediate, intermediates):
        loss = loss + wk * l1_loss(dk, gt)
    return loss


@dataclass
class TrainConfig:
    stage: int = 1
    learning_rate: float = 1e-3
    decay_factor: float = 0.9
    decay_interval: int = 500
    batch_size: int = 2
    iterations: int = 2000
    seed: int = 0
    n_views: int = 3
    loss_weights: LossWeights = field(default_factory=LossWeights)
    # stop once the refined-output loss term of a step falls below this
    stop_below: float | None = None
    log_path: str | None = None
    optimizer: dict = field(default_factory=lambda: dict(RMSPROP_DEFAULTS))

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if self.batch_size < 1 or self.iterations < 0 or self.decay_interval < 1 or self.n_views < 1:
            raise ValueError("batch_size, decay_interval and n_views must be positive, iterations non-negative")

    def lr_at(self, step: int) -> float:
        """Learning rate of 1-based ``step``."""
        return self.learning_rate * self.decay_factor ** ((step - 1) // self.decay_interval)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"]["intermediate"] = list(self.loss_weights.intermediate)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        path = Path(path)
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: line {exc.lineno}: {exc.msg}") from None


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    stage: int
    network: NetworkConfig
    planes: DisparityHypotheses
    state: dict[str, Tensor]
    aam1: str | None = None
    aam2: str | None = None
    history: list[float] = field(default_factory=list, repr=False)

    def header(self) -> dict:
        return {
            "stage": self.stage,
            "network": self.network.to_dict(),
            "planes": [self.planes.d_min, self.planes.delta, self.planes.count],
            "aam1": self.aam1,
            "aam2": self.aam2,
        }

    def save(self, path) -> None:
        names = sorted(self.state)
        tensors, offset = [], 0
        blobs = []
        for name in names:
            arr = self.state[name].detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4")
            blob = arr.tobytes()
            tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
            blobs.append(blob)
            offset += len(blob)
        header = json.dumps({**self.header(), "tensors": tensors}, sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(CKPT_MAGIC)
            f.write(struct.pack("<II", CKPT_VERSION, len(header)))
            f.write(header)
            for blob in blobs:
                f.write(blob)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        raw = path.read_bytes()
        if raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack_from("<II", raw, len(CKPT_MAGIC))
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        start = len(CKPT_MAGIC) + 8
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
        payload = memoryview(raw)[start + hlen :]
        state = {}
        for t in header["tensors"]:
            count = int(np.prod(t["shape"])) if t["shape"] else 1
            arr = np.frombuffer(payload, dtype="<f4", count=count, offset=t["offset"]).reshape(t["shape"])
            state[t["name"]] = torch.from_numpy(arr.copy())
        return cls(
            stage=header["stage"],
            network=NetworkConfig.from_dict(header["network"]),
            planes=disparity_planes(*header["planes"]),
            state=state,
            aam1=header["aam1"],
            aam2=header["aam2"],
        )

    def two_view_state(self) -> dict[str, Tensor]:
        prefix = "two_view."
        return {k[len(prefix) :]: v for k, v in self.state.items() if k.startswith(prefix)}

    def build_two_view(self) -> TwoViewNet:
        net = TwoViewNet(self.network, zero_init=False)
        state = self.two_view_state()
        expected = set(net.state_dict())
        missing = expected - set(state)
        if missing:
            raise ValueError(f"checkpoint lacks two-view weights: {sorted(missing)[:3]}...")
        net.load_state_dict(state)
        return net

    def build_model(self, aam1: str | None = None, aam2: str | None = None) -> ATVSNet:
        """Multi-view model; a stage-1 checkpoint gets freshly initialized aggregators."""
        a1 = aam1 or self.aam1 or "aam"
        a2 = aam2 or self.aam2 or "aam"
        model = ATVSNet(aam1=a1, aam2=a2, two_view=self.build_two_view())
        if self.stage == 2 and a1 == self.aam1 and a2 == self.aam2:
            agg = {k: v for k, v in self.state.items() if k.startswith(("aam1.", "aam2."))}
            missing = model.load_state_dict(agg, strict=False).missing_keys
            if any(k.startswith(("aam1.", "aam2.")) for k in missing):
                raise ValueError("checkpoint lacks aggregation weights")
        return model


def checkpoint_from_two_view(net: TwoViewNet, planes: DisparityHypotheses, stage: int = 1) -> Checkpoint:
    state = {f"two_view.{k}": v.detach().clone() for k, v in net.state_dict().items()}
    return Checkpoint(stage=stage, network=copy.deepcopy(net.cfg), planes=planes, state=state)


def checkpoint_from_model(model: ATVSNet, planes: DisparityHypotheses) -> Checkpoint:
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return Checkpoint(stage=2, network=copy.deepcopy(model.cfg), planes=planes, state=state,
                      aam1=model.aam1_kind, aam2=model.aam2_kind)


def parameter_digest(module: torch.nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, v in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# data plumbing


def normalize_images(images: np.ndarray) -> Tensor:
    """uint8 (..., H, W, 3) to float (..., 3, H, W) roughly in [-1, 1]."""
    x = torch.from_numpy(np.ascontiguousarray(images)).to(torch.float32) / 127.5 - 1.0
    return x.movedim(-1, -3)


def batch_views(samples: Sequence[MVSample], views: Sequence[Sequence[int]]) -> dict[str, Tensor]:
    """Stack the chosen views of each sample: images (B, V, 3, H, W), K, E, reference gt (B, H, W)."""
    imgs, Ks, Es, gts = [], [], [], []
    for s, v in zip(samples, views):
        v = list(v)
        imgs.append(normalize_images(s.images[v]))
        K, E = camera_tensors([s.cameras[i] for i in v])
        Ks.append(K)
        Es.append(E)
        gts.append(torch.from_numpy(s.disparities[v[0]].astype(np.float32)))
    return {"images": torch.stack(imgs), "K": torch.stack(Ks), "E": torch.stack(Es), "gt": torch.stack(gts)}


def pair_cameras(batch: dict, src: int = 1) -> CameraPair:
    return CameraPair(batch["K"][:, 0], batch["E"][:, 0], batch["K"][:, src], batch["E"][:, src])


def _seed_everything(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    return np.random.default_rng(seed)


class _BatchOrder:
    """Deterministic epoch-wise shuffled sample order."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.bs, self.rng = n, min(batch_size, n), rng
        self.order, self.pos = rng.permutation(n), 0

    def next(self) -> list[int]:
        out = []
        while len(out) < self.bs:
            if self.pos == self.n:
                self.order, self.pos = self.rng.permutation(self.n), 0
            out.append(int(self.order[self.pos]))
            self.pos += 1
        return out


class _Logger:
    def __init__(self, path):
        self.path = None if path is None else Path(path)
        if self.path is not None and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("step,stage,loss,lr\n")

    def write(self, step, stage, loss, lr):
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(f"{step},{stage},{loss:.8g},{lr:.8g}\n")


def _make_optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.RMSprop(params, lr=cfg.learning_rate, **cfg.optimizer)


# ---------------------------------------------------------------------------
# training loops


def train_stage1(
    dataset: Sequence[MVSample],
    config: TrainConfig,
    network: NetworkConfig | None = None,
    planes: DisparityHypotheses | None = None,
) -> Checkpoint:
    """Train the two-view network from scratch on (reference, random source) pairs."""
    if len(dataset) == 0:
        raise ValueError("training needs at least one sample")
    rng = _seed_everything(config.seed)
    planes = planes or dataset[0].planes
    net = TwoViewNet(network or NetworkConfig(plane_count=planes.count))
    if net.cfg.plane_count != planes.count:
        raise ValueError("network plane count does not match the hypotheses")
    net.train()
    opt = _make_optimizer(net.parameters(), config)
    order = _BatchOrder(len(dataset), config.batch_size, rng)
    log = _Logger(config.log_path)
    history = []
    for step in range(1, config.iterations + 1):
        idx = order.next()
        views = [(0, int(rng.integers(1, len(dataset[i].cameras)))) for i in idx]
        batch = batch_views([dataset[i] for i in idx], views)
        gt = downsample_disparity(batch["gt"], FEATURE_SCALE)
        lr = config.lr_at(step)
        for g in opt.param_groups:
            g["lr"] = lr
        out = net(batch["images"][:, 0], batch["images"][:, 1], pair_cameras(batch), planes)
        refined_term = l1_loss(out["refined"], gt).item()
        loss = total_loss(out["refined"], out["intermediates"], gt, config.loss_weights)
        history.append(loss.item())
        log.write(step, 1, history[-1], lr)
        if config.stop_below is not None and refined_term < config.stop_below:
            # the current weights achieved the target; keep them rather than stepping past
            break
        opt.zero_grad()
        loss.backward()
        opt.step()
    ckpt = checkpoint_from_two_view(net, planes, stage=1)
    ckpt.history = history
    return ckpt


def _branch_cache(model: ATVSNet, dataset, n_views: int, planes):
    """Refined volumes per sample; valid when everything before the second aggregator is frozen."""
    cache = []
    with torch.no_grad():
        for s in dataset:
            batch = batch_views([s], [range(n_views + 1)])
            out = model.branch_volumes(batch["images"], batch["K"], batch["E"], planes)
            cache.append(([v.clone() for v in out["refined_volumes"]], downsample_disparity(batch["gt"])))
    return cache


def train_stage2(
    dataset: Sequence[MVSample],
    stage1: Checkpoint,
    config: TrainConfig,
    aam1: str = "aam",
    aam2: str = "aam",
) -> Checkpoint:
    """Train only the aggregation modules on ``config.n_views`` sources with the two-view net frozen."""
    if len(dataset) == 0:
        raise ValueError("training needs at least one sample")
    if stage1 is None or not stage1.two_view_state():
        raise ValueError("stage 2 requires stage-1 two-view weights")
    for s in dataset:
        if s.num_sources < config.n_views:
            raise ValueError(f"sample {s.sample_id} has {s.num_sources} sources, need {config.n_views}")
    rng = _seed_everything(config.seed)
    planes = stage1.planes
    model = ATVSNet(aam1=aam1, aam2=aam2, two_view=stage1.build_two_view())
    for p in model.two_view.parameters():
        p.requires_grad_(False)
    params = list(model.aggregation_parameters())
    if not params:
        raise ValueError("the chosen aggregators have no trainable parameters")
    opt = _make_optimizer(params, config)
    cache = _branch_cache(model, dataset, config.n_views, planes) if model.aam1 is None else None
    order = _BatchOrder(len(dataset), config.batch_size, rng)
    log = _Logger(config.log_path)
    history = []
    for step in range(1, config.iterations + 1):
        idx = order.next()
        lr = config.lr_at(step)
        for g in opt.param_groups:
            g["lr"] = lr
        if cache is not None:
            vols = [torch.cat([cache[i][0][n] for i in idx]) for n in range(config.n_views)]
            gt = torch.cat([cache[i][1] for i in idx])
            _, _, d = model.aggregate_output(vols, planes)
        else:
            batch = batch_views([dataset[i] for i in idx], [range(config.n_views + 1)] * len(idx))
            gt = downsample_disparity(batch["gt"])
            d = model(batch["images"], batch["K"], batch["E"], planes)["refined"]
        loss = total_loss(d, None, gt, config.loss_weights)
        history.append(loss.item())
        log.write(step, 2, history[-1], lr)
        if config.stop_below is not None and l1_loss(d, gt).item() < config.stop_below:
            break
        opt.zero_grad()
        loss.backward()
        opt.step()
    ckpt = checkpoint_from_model(model, planes)
    ckpt.history = history
    return ckpt


def refinement_variant(base: TwoViewNet, use_geometric: bool = True, use_hull: bool = True, seed: int = 0) -> TwoViewNet:
    """Copy of ``base`` with a freshly initialized refinement net and the given guidance inputs."""
    cfg = copy.deepcopy(base.cfg)
    cfg.use_geometric, cfg.use_hull, cfg.use_refinement = use_geometric, use_hull, True
    torch.manual_seed(seed)
    net = TwoViewNet(cfg)
    state = {k: v for k, v in base.state_dict().items() if not k.startswith("refine.")}
    net.load_state_dict(state, strict=False)
    return net


def train_refinement_only(net: TwoViewNet, dataset: Sequence[MVSample], config: TrainConfig) -> list[float]:
    """Train just ``net.refine`` with everything else frozen, on cached guidance.

    Every sample contributes its (reference, source 1) pair.
    """
    if len(dataset) == 0:
        raise ValueError("training needs at least one sample")
    rng = _seed_everything(config.seed)
    planes = dataset[0].planes
    for name, p in net.named_parameters():
        p.requires_grad_(name.startswith("refine."))
    cache = []
    with torch.no_grad():
        for s in dataset:
            batch = batch_views([s], [(0, 1)])
            cams = pair_cameras(batch)
            out = net(batch["images"][:, 0], batch["images"][:, 1], cams, planes)
            guide = net.guidance(out["disp_ref"], out["disp_src"], out["f_low_ref"], out["f_low_src"],
                                 cams.scaled(FEATURE_SCALE), planes)
            cache.append((out["filtered"], guide, downsample_disparity(batch["gt"])))
    opt = _make_optimizer(net.refine.parameters(), config)
    order = _BatchOrder(len(dataset), config.batch_size, rng)
    log = _Logger(config.log_path)
    history = []
    for step in range(1, config.iterations + 1):
        idx = order.next()
        lr = config.lr_at(step)
        for g in opt.param_groups:
            g["lr"] = lr
        filtered = torch.cat([cache[i][0] for i in idx])
        guide = [torch.cat([cache[i][1][k] for i in idx]) for k in range(len(cache[0][1]))]
        gt = torch.cat([cache[i][2] for i in idx])
        _, d = net.output(refine_forward(net.refine, filtered, guide), planes)
        loss = total_loss(d, None, gt, config.loss_weights)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
        log.write(step, 1, history[-1], lr)
    for p in net.parameters():
        p.requires_grad_(True)
    return history
