"""Command-line surface: adi, train, eval, bench, errmap, params.

Flags mirror the training config in kebab-case; a `key = value` config file
can seed any of them, explicit flags win. ROADFUSION_SEED overrides the
seed from the environment. Every failure exits nonzero with a one-line
actionable message.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .adi import AdiConfig, cloud_to_adi, depth_to_adi, load_calibration, load_velodyne, write_adi_png
from .checkpoint import load_checkpoint, read_header
from .figures import save_latency_histogram
from .metrics import bench_latency, render_error_map, validate_latency_dict
from .network import ModelConfig, RoadFusionNet, build_model
from .nn import count_parameters
from .tensor import Tensor, no_grad, seed_all, spawn_rng
from .training import (
    TrainConfig,
    evaluate_samples,
    run_training,
    write_eval_artifacts,
    _load_samples,
)

log = logging.getLogger("roadfusion")


def _parse_config_file(path: str) -> dict:
    """`key = value` lines; values are JSON fragments with a string fallback."""
    values: dict = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, raw = line.partition("=")
        raw = raw.strip()
        try:
            values[key.strip().replace("-", "_")] = json.loads(raw)
        except json.JSONDecodeError:
            values[key.strip().replace("-", "_")] = raw
    return values


_TRAIN_FLAGS: dict[str, dict] = {
    "lr": {"type": float},
    "epochs": {"type": int},
    "batch_size": {"type": int},
    "seed": {"type": int},
    "height": {"type": int},
    "width": {"type": int},
    "weight_decay": {"type": float},
    "focal_alpha": {"type": float},
    "focal_gamma": {"type": float},
    "adi_neighborhood": {"type": int},
    "token_cap": {"type": int},
    "grad_clip": {"type": float},
    "warmup_steps": {"type": int},
    "max_iterations": {"type": int},
    "checkpoint_every": {"type": int},
    "dataset": {"choices": ["synth", "kitti"]},
    "synth_samples": {"type": int},
    "data_root": {},
    "split_file": {},
    "split": {"choices": ["train", "val"]},
    "out_dir": {},
}
_TRAIN_BOOLS = ("use_lidar", "use_fusion", "use_bridge")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value config file; explicit flags override it")
    for name, spec in _TRAIN_FLAGS.items():
        parser.add_argument(f"--{name.replace('_', '-')}", default=None, **spec)
    for name in _TRAIN_BOOLS:
        flag = name.replace("_", "-").replace("use-", "")
        parser.add_argument(f"--no-{flag}", dest=name, action="store_false", default=None)
    parser.add_argument("--augment-flip", dest="augment_flip", action="store_true", default=None)


def _resolve_config(args: argparse.Namespace) -> TrainConfig:
    merged: dict = {}
    if getattr(args, "config", None):
        merged.update(_parse_config_file(args.config))
    for name in list(_TRAIN_FLAGS) + list(_TRAIN_BOOLS) + ["augment_flip"]:
        value = getattr(args, name, None)
        if value is not None:
            merged[name] = value
    env_seed = os.environ.get("ROADFUSION_SEED")
    if env_seed is not None:
        merged["seed"] = int(env_seed)
    unknown = set(merged) - set(TrainConfig.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
    config = TrainConfig(**merged)
    if config.lr <= 0:
        raise ValueError(f"learning rate must be positive, got {config.lr}")
    if config.epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {config.epochs}")
    return config


def _model_from_checkpoint(path: str) -> tuple[RoadFusionNet, dict]:
    header = read_header(path)
    saved = header.get("config") or {}
    model_cfg = ModelConfig(
        use_lidar=saved.get("use_lidar", True),
        use_fusion=saved.get("use_fusion", True),
        use_bridge=saved.get("use_bridge", True),
        token_cap=saved.get("token_cap", 1024),
    )
    model = RoadFusionNet(model_cfg)
    load_checkpoint(path, model)
    model.eval()
    return model, saved


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_adi(args: argparse.Namespace) -> int:
    config = AdiConfig(neighborhood=args.neighborhood, dilate=args.dilate)
    if args.velodyne:
        if not args.calib or not args.image_size:
            raise ValueError("--velodyne requires --calib and --image-size HxW")
        h, w = (int(t) for t in args.image_size.lower().split("x"))
        adi = cloud_to_adi(load_velodyne(args.velodyne), load_calibration(args.calib), (h, w), config)
    elif args.depth:
        if not args.intrinsics:
            raise ValueError("--depth requires --intrinsics fx,fy,cx,cy")
        fx, fy, cx, cy = (float(t) for t in args.intrinsics.split(","))
        depth = np.load(args.depth)
        adi = depth_to_adi(depth, np.array([[fx, 0, cx], [0, fy, cy], [0, 0, 1.0]]), config)
    else:
        raise ValueError("provide either --velodyne + --calib or --depth + --intrinsics")
    write_adi_png(adi, args.out)
    log.info("wrote %s (%dx%d, %d valid pixels)", args.out, *adi.extents, int(adi.valid.sum()))
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    result = run_training(config)
    log.info("history: %s", result["history_csv"])
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    for line in config.resolved_lines():
        log.info("config: %s", line)
    model, _ = _model_from_checkpoint(args.checkpoint)
    samples = _load_samples(config)
    report, _ = evaluate_samples(model, samples, config.batch_size)
    out = Path(args.out or config.out_dir)
    write_eval_artifacts(report, out)
    print(report.to_text())
    log.info("eval artifacts in %s", out)
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    log.info("config: checkpoint=%s height=%s width=%s warmup=%d iters=%d seed=%s",
             args.checkpoint, args.height, args.width, args.warmup, args.iters, args.seed)
    seed_all(args.seed if args.seed is not None else 0)
    if args.checkpoint:
        model, _ = _model_from_checkpoint(args.checkpoint)
    else:
        model = build_model(ModelConfig(), rng=spawn_rng(1))
        model.eval()
    h, w = args.height or 384, args.width or 1248
    rng = spawn_rng(2)
    rgb = Tensor(rng.standard_normal((1, 3, h, w)).astype(np.float32))
    adi = Tensor(rng.standard_normal((1, 3, h, w)).astype(np.float32))

    def forward():
        with no_grad():
            model(rgb, adi)

    stats = bench_latency(forward, warmup=args.warmup, iters=args.iters)
    payload = stats.to_dict()
    payload.update({
        "params": count_parameters(model),
        "height": h,
        "width": w,
        "batch": 1,
    })
    validate_latency_dict(payload)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "latency.json").write_text(json.dumps(payload, indent=2) + "\n")
    with open(out / "latency.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "latency_ms"])
        for i, ms in enumerate(stats.samples_ms):
            writer.writerow([i, repr(ms)])
    save_latency_histogram(stats, out / "latency_hist.png")
    print(f"mean {stats.mean_ms:.2f} ms | median {stats.median_ms:.2f} ms | "
          f"p95 {stats.p95_ms:.2f} ms | {stats.fps:.2f} FPS")
    return 0


def cmd_errmap(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    for line in config.resolved_lines():
        log.info("config: %s", line)
    model, _ = _model_from_checkpoint(args.checkpoint)
    samples = _load_samples(config)
    if args.limit:
        samples = samples[: args.limit]
    report, prob_maps = evaluate_samples(model, samples, config.batch_size)
    threshold = report.threshold if args.threshold is None else args.threshold
    out = Path(args.out or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_id = {s.frame_id: s for s in samples}
    for frame_id, prob in prob_maps:
        s = by_id[frame_id]
        raster, counts = render_error_map(prob, s.target, s.valid, threshold, s.rgb_image)
        Image.fromarray(raster).save(out / f"{frame_id}_errmap.png")
        (out / f"{frame_id}_errmap.txt").write_text(
            f"frame {frame_id}\nthreshold {threshold:.6f}\n"
            f"f1 {100.0 * counts.f1():.2f}\niou {100.0 * counts.iou():.2f}\n"
        )
    log.info("wrote %d error maps to %s (threshold %.4f)", len(prob_maps), out, threshold)
    return 0


def cmd_params(args: argparse.Namespace) -> int:
    model_cfg = ModelConfig(
        use_lidar=args.use_lidar if args.use_lidar is not None else True,
        use_fusion=args.use_fusion if args.use_fusion is not None else True,
        use_bridge=args.use_bridge if args.use_bridge is not None else True,
    )
    model = RoadFusionNet(model_cfg)
    table = model.parameter_breakdown()
    width = max(len(k) for k in table)
    lines = [f"{k:<{width}}  {v:>12,d}  {v / 1e6:8.3f} M" for k, v in table.items()]
    if args.reference_total is not None:
        delta = table["total"] / 1e6 - args.reference_total
        lines.append(f"{'delta vs reference':<{width}}  {delta:+12.3f} M "
                     f"(reference {args.reference_total:.2f} M)")
    print("\n".join(lines))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "params.txt").write_text("\n".join(lines) + "\n")
        with open(out / "params.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["module", "parameters"])
            for k, v in table.items():
                writer.writerow([k, v])
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="roadfusion",
                                     description="RGB + LiDAR road segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("adi", help="point cloud or depth map -> altitude-difference PNG")
    p.add_argument("--velodyne", help="binary point-cloud file (x,y,z,reflectance float32)")
    p.add_argument("--calib", help="calibration text file")
    p.add_argument("--image-size", help="target extents as HxW, e.g. 375x1242")
    p.add_argument("--depth", help="dense depth map (.npy, meters)")
    p.add_argument("--intrinsics", help="fx,fy,cx,cy of the depth camera")
    p.add_argument("--neighborhood", type=int, default=11)
    p.add_argument("--dilate", type=int, default=0, help="visualization-only max-pool radius")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_adi)

    p = sub.add_parser("train", help="train on the synthetic or KITTI dataset")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint -> metrics report")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="forward-latency benchmark (preprocessing excluded)")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--height", type=int, default=384)
    p.add_argument("--width", type=int, default=1248)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="runs/bench")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("errmap", help="render TP/FP/FN error maps with metric sidecars")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=float, default=None,
                   help="fixed binarization threshold; default: the MaxF threshold")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_errmap)

    p = sub.add_parser("params", help="per-module parameter table")
    for name in _TRAIN_BOOLS:
        flag = name.replace("_", "-").replace("use-", "")
        p.add_argument(f"--no-{flag}", dest=name, action="store_false", default=None)
    p.add_argument("--reference-total", type=float, default=None,
                   help="published total (in millions) to report a delta against")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_params)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
