"""Desk-scale ablation runs: refinement inputs and aggregation strategies."""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from typing import Sequence

import torch

from atvsnet.aggregation import ATVSNet
from atvsnet.metrics import MetricReport, compute_metrics, evaluate_dataset, mean_report
from atvsnet.networks import NetworkConfig, TwoViewNet, upsample_disparity
from atvsnet.synthetic import MVSample
from atvsnet.training import (
    Checkpoint,
    TrainConfig,
    batch_views,
    pair_cameras,
    refinement_variant,
    train_refinement_only,
    train_stage1,
    train_stage2,
)


def initial_reports(base: TwoViewNet, dataset: Sequence[MVSample]) -> list[MetricReport]:
    """Metrics of the disparity read out before refinement (reference and source 1)."""
    base.eval()
    reports = []
    with torch.no_grad():
        for s in dataset:
            b = batch_views([s], [(0, 1)])
            d = base(b["images"][:, 0], b["images"][:, 1], pair_cameras(b), s.planes)["disp_ref"]
            d = upsample_disparity(d, s.disparities.shape[1:])[0]
            reports.append(compute_metrics(d, s.disparities[0], s.planes.delta))
    return reports


@dataclass
class RefinementAblation:
    seed: int
    reports: dict[str, list[MetricReport]] = field(default_factory=dict)

    def median(self, variant: str, metric: str = "l1") -> float:
        return statistics.median(getattr(r, metric) for r in self.reports[variant] if r.valid)


REFINEMENT_VARIANTS = {
    "full": {"use_geometric": True, "use_hull": True},
    "no_geometry": {"use_geometric": False, "use_hull": False},
}


def train_base(train_set: Sequence[MVSample], seed: int, iterations: int, network: NetworkConfig | None = None) -> Checkpoint:
    return train_stage1(train_set, TrainConfig(iterations=iterations, seed=seed), network=network)


def refinement_ablation(
    base: Checkpoint,
    train_set: Sequence[MVSample],
    test_set: Sequence[MVSample],
    seed: int,
    refine_iterations: int,
) -> RefinementAblation:
    """Compare no refinement against fresh refinement nets trained on a frozen base.

    Every variant shares the same feature extractor and cost regularization.
    """
    net = base.build_two_view()
    result = RefinementAblation(seed)
    result.reports["none"] = initial_reports(net, test_set)
    for name, flags in REFINEMENT_VARIANTS.items():
        variant = refinement_variant(net, seed=seed, **flags)
        train_refinement_only(variant, train_set, TrainConfig(iterations=refine_iterations, seed=seed))
        _, rows = evaluate_dataset(variant, test_set)
        result.reports[name] = [r for _, r in rows]
    return result


def aggregation_trend(
    base: Checkpoint,
    train_set: Sequence[MVSample],
    test_set: Sequence[MVSample],
    seed: int,
    iterations: int,
    train_views: int = 3,
    eval_views: Sequence[int] = (3, 5),
    kinds: Sequence[str] = ("mean", "aam"),
) -> dict[tuple[str, int], MetricReport]:
    """Mean metrics of each second-point aggregator at each view count.

    Only the second aggregation point is active so that the frozen branches are
    identical across aggregators; learnable aggregators are trained on
    ``train_views`` sources.
    """
    out = {}
    for kind in kinds:
        model = ATVSNet(aam1="none", aam2=kind, two_view=base.build_two_view())
        if any(True for _ in model.aggregation_parameters()):
            cfg = TrainConfig(stage=2, iterations=iterations, seed=seed, n_views=train_views)
            ckpt = train_stage2(train_set, base, cfg, aam1="none", aam2=kind)
            model = ckpt.build_model()
        for n in eval_views:
            report, _ = evaluate_dataset(model, test_set, n_views=n)
            out[(kind, n)] = report
    return out


def summarize_refinement(runs: Sequence[RefinementAblation], metric: str = "l1") -> dict[str, float]:
    """Median across seeds of each variant's per-seed median."""
    return {v: statistics.median(r.median(v, metric) for r in runs) for v in runs[0].reports}


def seed_noise(runs: Sequence[RefinementAblation], variant: str = "full", metric: str = "l1") -> float:
    """Spread (sample standard deviation) of a variant's per-seed medians."""
    values = [r.median(variant, metric) for r in runs]
    return statistics.stdev(values) if len(values) > 1 else 0.0


def mean_over(reports: Sequence[MetricReport]) -> MetricReport:
    return mean_report(reports)
