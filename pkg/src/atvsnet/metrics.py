"""Depth and disparity error metrics plus dataset evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from atvsnet.aggregation import ATVSNet
from atvsnet.networks import TwoViewNet, upsample_disparity

INLIER_STEPS = (1, 3, 5, 10)
CSV_HEADER = "sample_id,l1,l1_inv,l1_rel,sc_inv,in1,in3,in5,in10"


@dataclass
class MetricReport:
    l1: float
    l1_inv: float
    l1_rel: float
    sc_inv: float
    inlier: dict[int, float] = field(default_factory=dict)
    pixel_count: int = 0

    @property
    def valid(self) -> bool:
        return self.pixel_count > 0

    def values(self) -> list[float]:
        return [self.l1, self.l1_inv, self.l1_rel, self.sc_inv] + [self.inlier[k] for k in INLIER_STEPS]

    def csv_row(self, sample_id: str) -> str:
        return ",".join([sample_id] + [f"{v:.8g}" for v in self.values()])


def empty_report() -> MetricReport:
    nan = float("nan")
    return MetricReport(nan, nan, nan, nan, {k: nan for k in INLIER_STEPS}, 0)


def _as_array(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def compute_metrics(pred_disp, gt_disp, delta_threshold: float) -> MetricReport:
    """Errors over pixels where both disparities are finite and positive.

    L1, L1-rel and Sc-inv are measured on depth (reciprocal disparity), L1-inv
    on disparity; ``inlier[k]`` is the percentage with ``|d - d'| < k * delta_threshold``.
    """
    pred, gt = _as_array(pred_disp), _as_array(gt_disp)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if not delta_threshold > 0:
        raise ValueError("delta_threshold must be positive")
    with np.errstate(invalid="ignore"):
        mask = np.isfinite(gt) & (gt > 0) & np.isfinite(pred) & (pred > 0)
    n = int(mask.sum())
    if n == 0:
        return empty_report()
    d, dg = pred[mask], gt[mask]
    z, zg = 1.0 / d, 1.0 / dg
    g = np.log(z) - np.log(zg)
    ad = np.abs(d - dg)
    return MetricReport(
        l1=float(np.mean(np.abs(z - zg))),
        l1_inv=float(np.mean(ad)),
        l1_rel=float(np.mean(np.abs(z - zg) / zg)),
        sc_inv=float(math.sqrt(max(np.mean(g * g) - np.mean(g) ** 2, 0.0))),
        inlier={k: float(100.0 * np.mean(ad < k * delta_threshold)) for k in INLIER_STEPS},
        pixel_count=n,
    )


def mean_report(reports: Sequence[MetricReport]) -> MetricReport:
    """Per-sample mean; samples without valid pixels are skipped."""
    good = [r for r in reports if r.valid]
    if not good:
        return empty_report()
    mean = lambda xs: float(np.mean(xs))  # noqa: E731
    return MetricReport(
        l1=mean([r.l1 for r in good]),
        l1_inv=mean([r.l1_inv for r in good]),
        l1_rel=mean([r.l1_rel for r in good]),
        sc_inv=mean([r.sc_inv for r in good]),
        inlier={k: mean([r.inlier[k] for r in good]) for k in INLIER_STEPS},
        pixel_count=sum(r.pixel_count for r in good),
    )


def format_table(rows: Sequence[tuple[str, MetricReport]]) -> str:
    names = ["L1", "L1-inv", "L1-rel", "Sc-inv"] + [f"<{k}d" if k > 1 else "<d" for k in INLIER_STEPS]
    width = max([len("model")] + [len(r[0]) for r in rows])
    lines = ["  ".join([f"{'model':<{width}}"] + [f"{n:>9}" for n in names])]
    for label, rep in rows:
        cells = [f"{v:9.4f}" for v in rep.values()[:4]] + [f"{v:8.2f}%" for v in rep.values()[4:]]
        lines.append("  ".join([f"{label:<{width}}"] + cells))
    return "\n".join(lines)


def write_metrics_csv(path, rows: Sequence[tuple[str, MetricReport]]) -> None:
    Path(path).write_text(CSV_HEADER + "\n" + "".join(rep.csv_row(sid) + "\n" for sid, rep in rows))


# ---------------------------------------------------------------------------
# model evaluation


def predict(model, sample, n_views: int = 1) -> np.ndarray:
    """Full-resolution reference disparity for ``sample``.

    A :class:`TwoViewNet` uses source 1 only; an :class:`ATVSNet` uses the
    first ``n_views`` sources.
    """
    from atvsnet.training import batch_views, pair_cameras

    planes = sample.planes
    H, W = sample.disparities.shape[1:]
    with torch.no_grad():
        if isinstance(model, TwoViewNet):
            b = batch_views([sample], [(0, 1)])
            d = model(b["images"][:, 0], b["images"][:, 1], pair_cameras(b), planes)["refined"]
        elif isinstance(model, ATVSNet):
            if sample.num_sources < n_views:
                raise ValueError(f"sample {sample.sample_id} has {sample.num_sources} sources, need {n_views}")
            b = batch_views([sample], [range(n_views + 1)])
            d = model(b["images"], b["K"], b["E"], planes)["refined"]
        else:
            raise TypeError(f"cannot evaluate a {type(model).__name__}")
    return upsample_disparity(d, (H, W))[0].numpy()


def load_model(ckpt):
    """Two-view net for stage-1 checkpoints, the multi-view net for stage 2."""
    return ckpt.build_two_view() if ckpt.stage == 1 else ckpt.build_model()


def evaluate_predictions(predictions, dataset, delta_threshold: float | None = None):
    rows = []
    for pred, s in zip(predictions, dataset):
        delta = delta_threshold if delta_threshold is not None else s.planes.delta
        rows.append((s.sample_id, compute_metrics(pred, s.disparities[0], delta)))
    return mean_report([r for _, r in rows]), rows


def evaluate_dataset(model_ckpt, dataset, n_views: int = 1, delta_threshold: float | None = None, csv_path=None):
    """Mean report over ``dataset`` and per-sample ``(sample_id, report)`` rows.

    ``model_ckpt`` is a checkpoint or an already built network.
    """
    model = model_ckpt if isinstance(model_ckpt, (TwoViewNet, ATVSNet)) else load_model(model_ckpt)
    model.eval()
    preds = [predict(model, s, n_views) for s in dataset]
    report, rows = evaluate_predictions(preds, dataset, delta_threshold)
    if csv_path is not None:
        write_metrics_csv(csv_path, rows)
    return report, rows
