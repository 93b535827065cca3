"""Command-line entry point: ``atvsnet <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

SNAPSHOT_NAME = "run_config.json"

# anchor colours of a perceptually ordered dark-to-bright map
_COLORMAP = np.array(
    [[48, 18, 59], [70, 107, 227], [40, 188, 235], [50, 241, 151], [164, 252, 60], [239, 207, 58], [251, 128, 34],
     [210, 49, 5], [122, 4, 3]],
    dtype=np.float64,
)


def colorize(disp: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """RGB uint8 rendering of a disparity map; invalid pixels are black."""
    valid = np.isfinite(disp) & (disp > 0)
    t = np.clip((np.where(valid, disp, lo) - lo) / max(hi - lo, 1e-12), 0, 1) * (len(_COLORMAP) - 1)
    i = np.minimum(np.floor(t).astype(int), len(_COLORMAP) - 2)
    f = (t - i)[..., None]
    rgb = _COLORMAP[i] * (1 - f) + _COLORMAP[i + 1] * f
    rgb[~valid] = 0
    return np.round(rgb).astype(np.uint8)


def _add_planes(p):
    p.add_argument("--d-min", type=float, default=0.1, help="disparity offset of the hypothesis planes")
    p.add_argument("--delta", type=float, default=0.025, help="disparity step between planes")
    p.add_argument("--planes", type=int, default=16, help="number of hypothesis planes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atvsnet", description="Multi-view stereo with order-invariant aggregation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic multi-view dataset")
    p.add_argument("--out", required=True, help="dataset root directory")
    p.add_argument("--count", type=int, default=8, help="number of scenes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sources", type=int, default=5, help="source views per scene")
    p.add_argument("--size", type=int, nargs=2, default=[64, 64], metavar=("W", "H"))
    p.add_argument("--low-texture-prob", type=float, default=0.2, help="chance an object gets a flat texture")
    _add_planes(p)

    p = sub.add_parser("train", help="train stage 1 (two-view) or stage 2 (aggregation)")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--out", required=True, help="output directory for checkpoint, log and config")
    p.add_argument("--config", help="JSON training config; command-line flags override it")
    p.add_argument("--init", help="stage-1 checkpoint (required for stage 2)")
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--n-views", type=int, help="source views used in stage 2")
    p.add_argument("--aam1", default="aam", choices=("none", "mean", "attsets", "aam"))
    p.add_argument("--aam2", default="aam", choices=("mean", "attsets", "aam"))

    p = sub.add_parser("infer", help="predict reference disparities (PFM + colormap PNG)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-views", type=int, default=1, help="source views (multi-view checkpoints)")

    p = sub.add_parser("eval", help="metrics table and per-sample CSV")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt", help="checkpoint to evaluate")
    src.add_argument("--predictions", help="directory of <sample_id>.pfm predictions")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-views", type=int, default=1)
    p.add_argument("--delta-threshold", type=float, help="inlier step (defaults to the plane step)")

    p = sub.add_parser("fuse", help="consistency-filter per-view disparities and write PLY clouds")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--ckpt", help="predict every view with this checkpoint")
    group.add_argument("--ground-truth", action="store_true", help="fuse the ground-truth maps")
    p.add_argument("--n-views", type=int, default=1)
    p.add_argument("--min-views", type=int, help="agreeing views required (default 1 for 2 views, else 2)")
    p.add_argument("--tolerance", type=float, help="disparity agreement tolerance (default: plane step)")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional directory for the config snapshot")

    p = sub.add_parser("selftest", help="run the quick invariant checks")
    p.add_argument("--out", help="optional directory for the config snapshot")

    p = sub.add_parser("replay", help="re-run a command from its config snapshot")
    p.add_argument("snapshot")
    return parser


OUT_MARKER = "{snapshot_dir}"


def _with_out(argv: list[str], value: str) -> list[str]:
    """``argv`` with the value of ``--out`` replaced."""
    res = list(argv)
    for i, a in enumerate(res):
        if a == "--out" and i + 1 < len(res):
            res[i + 1] = value
        elif a.startswith("--out="):
            res[i] = "--out=" + value
    return res


INPUT_FLAGS = ("--data", "--ckpt", "--init", "--config", "--predictions")


def _absolute_inputs(argv: list[str]) -> list[str]:
    res = list(argv)
    for i, a in enumerate(res):
        if a in INPUT_FLAGS and i + 1 < len(res):
            res[i + 1] = str(Path(res[i + 1]).resolve())
        elif "=" in a and a.split("=", 1)[0] in INPUT_FLAGS:
            flag, value = a.split("=", 1)
            res[i] = f"{flag}={Path(value).resolve()}"
    return res


def write_snapshot(out_dir, args: argparse.Namespace, argv: list[str], extra: dict | None = None) -> Path:
    """Record the command and its resolved options next to the outputs.

    The output directory is stored as a placeholder so identical runs into
    different directories produce identical snapshots; ``replay`` substitutes
    the snapshot's own directory.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    argv = _absolute_inputs(argv)
    resolved = vars(args) | {"out": OUT_MARKER} | (extra or {})
    for key in INPUT_FLAGS:
        name = key[2:].replace("-", "_")
        if resolved.get(name):
            resolved[name] = str(Path(resolved[name]).resolve())
    snap = {"command": args.command, "argv": _with_out(argv, OUT_MARKER), "resolved": resolved}
    path = out / SNAPSHOT_NAME
    path.write_text(json.dumps(snap, indent=1, sort_keys=True, default=str) + "\n")
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    from atvsnet.synthetic import make_dataset, write_dataset

    samples = make_dataset(
        args.count, seed=args.seed, num_sources=args.sources, image_size=tuple(args.size),
        disparity_range=(args.d_min, args.delta, args.planes), low_texture_prob=args.low_texture_prob,
    )
    write_dataset(samples, args.out)
    print(f"wrote {len(samples)} scenes to {args.out}")
    return 0


def cmd_train(args) -> tuple[int, dict]:
    from atvsnet.synthetic import read_dataset
    from atvsnet.training import Checkpoint, TrainConfig, train_stage1, train_stage2

    cfg = TrainConfig.from_file(args.config).to_dict() if args.config else TrainConfig().to_dict()
    overrides = {"iterations": args.iterations, "seed": args.seed, "learning_rate": args.lr,
                 "batch_size": args.batch_size, "n_views": args.n_views}
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg["stage"] = args.stage
    cfg["log_path"] = str(out / "train_log.csv")
    (out / "train_log.csv").unlink(missing_ok=True)
    config = TrainConfig.from_dict(cfg)
    dataset = read_dataset(args.data)
    if args.stage == 1:
        ckpt = train_stage1(dataset, config)
    else:
        if not args.init:
            raise ValueError("stage 2 needs --init with a stage-1 checkpoint")
        ckpt = train_stage2(dataset, Checkpoint.load(args.init), config, aam1=args.aam1, aam2=args.aam2)
    ckpt.save(out / f"stage{args.stage}.ckpt")
    print(f"stage {args.stage}: {len(ckpt.history)} steps, final loss {ckpt.history[-1]:.5f}" if ckpt.history else "no steps")
    return 0, {"train_config": config.to_dict(), "network": ckpt.network.to_dict()}


def cmd_infer(args) -> int:
    from atvsnet.io import write_pfm, write_png
    from atvsnet.metrics import load_model, predict
    from atvsnet.synthetic import read_dataset
    from atvsnet.training import Checkpoint

    model = load_model(Checkpoint.load(args.ckpt))
    model.eval()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in read_dataset(args.data):
        d = predict(model, s, args.n_views)
        write_pfm(out / f"{s.sample_id}.pfm", d)
        write_png(out / f"{s.sample_id}.png", colorize(d, s.planes.lowest, s.planes.highest))
        write_png(out / f"{s.sample_id}_gt.png", colorize(s.disparities[0], s.planes.lowest, s.planes.highest))
    print(f"predictions written to {out}")
    return 0


def cmd_eval(args) -> int:
    from atvsnet.io import ParseError, read_pfm
    from atvsnet.metrics import evaluate_dataset, evaluate_predictions, format_table, write_metrics_csv
    from atvsnet.synthetic import read_dataset
    from atvsnet.training import Checkpoint

    dataset = read_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.ckpt:
        report, rows = evaluate_dataset(Checkpoint.load(args.ckpt), dataset, args.n_views, args.delta_threshold)
        label = Path(args.ckpt).stem
    else:
        preds = []
        for s in dataset:
            path = Path(args.predictions) / f"{s.sample_id}.pfm"
            if not path.exists():
                raise ParseError(f"{path}: prediction for {s.sample_id} missing")
            preds.append(read_pfm(path))
        report, rows = evaluate_predictions(preds, dataset, args.delta_threshold)
        label = Path(args.predictions).name
    write_metrics_csv(out / "metrics.csv", rows)
    table = format_table([(label, report)])
    (out / "metrics_table.txt").write_text(table + "\n")
    print(table)
    return 0


def _reordered(sample, ref: int):
    """Copy of ``sample`` with view ``ref`` as the reference."""
    from dataclasses import replace

    order = [ref] + [v for v in range(len(sample.cameras)) if v != ref]
    return replace(sample, images=sample.images[order], cameras=[sample.cameras[v] for v in order],
                   disparities=sample.disparities[order], visibility=np.zeros((0,) + sample.disparities.shape[1:], bool))


def cmd_fuse(args) -> int:
    from atvsnet.fusion import fuse_views
    from atvsnet.metrics import load_model, predict
    from atvsnet.synthetic import read_dataset
    from atvsnet.training import Checkpoint

    model = None
    if args.ckpt:
        model = load_model(Checkpoint.load(args.ckpt))
        model.eval()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in read_dataset(args.data):
        if model is None:
            maps = s.disparities
        else:
            maps = np.stack([predict(model, _reordered(s, v), args.n_views) for v in range(len(s.cameras))])
        tol = args.tolerance if args.tolerance is not None else s.planes.delta
        cloud = fuse_views(maps, s.cameras, s.images, args.min_views, tol)
        cloud.write(out / f"{s.sample_id}.ply")
        msg = f"{s.sample_id}: {len(cloud)} points"
        if s.scene is not None and len(cloud):
            msg += f", mean surface distance {s.scene.surface_distance(cloud.points).mean():.5f}"
        print(msg)
    return 0


def cmd_gradcheck(args) -> int:
    from atvsnet.gradcheck import TOLERANCE, run_all

    failed = 0
    for r in run_all(args.seed):
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<22} max rel error {r.max_rel_error:.3e}  {status}")
        failed += not r.passed
    print(f"tolerance {TOLERANCE:g}: {'all passed' if not failed else f'{failed} failed'}")
    return 1 if failed else 0


def cmd_selftest(args) -> int:
    from atvsnet.selftest import run_selftest

    bad = []
    for name, ok, err in run_selftest():
        print(f"[{'ok' if ok else 'FAIL'}] {name}" + (f" ({err})" if err else ""))
        if not ok:
            bad.append(name)
    if bad:
        print("violated: " + "; ".join(bad), file=sys.stderr)
        return 1
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "fuse": cmd_fuse,
    "gradcheck": cmd_gradcheck,
    "selftest": cmd_selftest,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    if args.command == "replay":
        path = Path(args.snapshot)
        snap = json.loads(path.read_text())
        return main(_with_out(snap["argv"], str(path.parent)))
    try:
        result = COMMANDS[args.command](args)
    except (ValueError, OSError) as exc:
        print(f"atvsnet {args.command}: error: {exc}", file=sys.stderr)
        return 1
    code, extra = result if isinstance(result, tuple) else (result, None)
    out = getattr(args, "out", None)
    if out is not None:
        write_snapshot(out, args, argv, extra)
    return code


if __name__ == "__main__":
    sys.exit(main())
