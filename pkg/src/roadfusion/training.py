"""Training and evaluation loops plus their on-disk artifacts.

Every run logs its fully resolved configuration and seed. The history file
is append-only delimited text; checkpoints embed the config; the cosine
schedule is stepped per iteration over epochs * batches total steps.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import functional as F
from .adi import AdiConfig
from .checkpoint import save_checkpoint
from .data import Batch, PrefetchLoader, Sample, batch_samples, synth_dataset
from .figures import save_threshold_curve, save_training_curves
from .losses import AUX_WEIGHTS, FOCAL_ALPHA, FOCAL_GAMMA, bundle_from_output, downsample_labels, total_loss
from .metrics import MetricsReport, quantized_histograms, sweep_from_histograms
from .network import ModelConfig, RoadFusionNet, build_model
from .nn import count_parameters
from .optim import AdamW, NonFiniteGradient, cosine_lr
from .tensor import Tensor, no_grad, seed_all, spawn_rng

__all__ = ["TrainConfig", "run_training", "evaluate_samples", "predict_probabilities"]

log = logging.getLogger("roadfusion")

HISTORY_FIELDS = ("iteration", "epoch", "lr", "bce", "lovasz", "focal", "main",
                  "aux1", "aux2", "aux3", "total")


@dataclass
class TrainConfig:
    lr: float = 2e-4
    epochs: int = 150
    batch_size: int = 2
    seed: int = 0
    height: int = 384
    width: int = 1248
    weight_decay: float = 1e-2
    aux_weights: tuple[float, float, float] = AUX_WEIGHTS
    focal_alpha: float = FOCAL_ALPHA
    focal_gamma: float = FOCAL_GAMMA
    adi_neighborhood: int = 11
    token_cap: Optional[int] = 1024
    grad_clip: Optional[float] = None
    warmup_steps: int = 0
    augment_flip: bool = False
    max_iterations: Optional[int] = None
    checkpoint_every: int = 200
    dataset: str = "synth"           # synth | kitti
    synth_samples: int = 64
    data_root: Optional[str] = None
    split_file: Optional[str] = None
    split: str = "train"             # side of the fallback split (train | val)
    out_dir: str = "runs/default"
    use_lidar: bool = True
    use_fusion: bool = True
    use_bridge: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.use_lidar, self.use_fusion, self.use_bridge, self.token_cap)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["aux_weights"] = list(self.aux_weights)
        return d

    def resolved_lines(self) -> list[str]:
        return [f"{k} = {v}" for k, v in sorted(self.to_dict().items())]


def _load_samples(config: TrainConfig) -> list[Sample]:
    if config.dataset == "synth":
        return synth_dataset(config.seed, config.synth_samples,
                             (config.height, config.width),
                             AdiConfig(config.adi_neighborhood))
    if config.dataset == "kitti":
        from .data import default_split, list_kitti_frames, load_kitti_sample, load_split_file

        if not config.data_root:
            raise ValueError("dataset 'kitti' requires --data-root")
        frames = list_kitti_frames(config.data_root, "training")
        if config.split_file:
            frames = load_split_file(config.split_file)
        else:
            train_frames, val_frames = default_split(frames)
            if config.split not in ("train", "val"):
                raise ValueError(f"split must be 'train' or 'val', got {config.split!r}")
            frames = train_frames if config.split == "train" else val_frames
        return [
            load_kitti_sample(config.data_root, "training", f, AdiConfig(config.adi_neighborhood))
            for f in frames
        ]
    raise ValueError(f"unknown dataset {config.dataset!r} (expected 'synth' or 'kitti')")


def _clip_gradients(named_params, max_norm: float) -> None:
    total = 0.0
    grads = [p.grad for _, p in named_params if p.grad is not None]
    for g in grads:
        total += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale


class _AuxTargetCache:
    """Downsampled supervision computed once per (sample, extents)."""

    def __init__(self):
        self._store: dict[tuple[str, tuple[int, int]], np.ndarray] = {}

    def get(self, frame_id: str, target: np.ndarray, size: tuple[int, int]) -> np.ndarray:
        key = (frame_id, size)
        if key not in self._store:
            self._store[key] = downsample_labels(target, size)
        return self._store[key]


def _flip_sample(s: Sample) -> Sample:
    return Sample(
        frame_id=s.frame_id + "~flip",
        rgb=np.ascontiguousarray(s.rgb[:, :, ::-1]),
        adi=np.ascontiguousarray(s.adi[:, :, ::-1]),
        target=np.ascontiguousarray(s.target[:, ::-1]),
        valid=np.ascontiguousarray(s.valid[:, ::-1]),
        rgb_image=np.ascontiguousarray(s.rgb_image[:, ::-1]),
    )


def _epoch_batches(samples: Sequence[Sample], batch_size: int, epoch: int,
                   augment_flip: bool = False):
    rng = spawn_rng(10_000 + epoch)
    order = rng.permutation(len(samples))
    flips = rng.random(len(order)) < 0.5 if augment_flip else np.zeros(len(order), dtype=bool)
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        chosen = [
            _flip_sample(samples[i]) if flips[pos] else samples[i]
            for pos, i in enumerate(idx, start)
        ]
        yield batch_samples(chosen)


def run_training(config: TrainConfig, samples: Optional[Sequence[Sample]] = None) -> dict:
    """Train per the config; returns paths and the last-iteration loss row."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed_all(config.seed)

    for line in config.resolved_lines():
        log.info("config: %s", line)
    (out / "config.txt").write_text("\n".join(config.resolved_lines()) + "\n")

    if samples is None:
        samples = _load_samples(config)
    log.info("dataset: %d samples at %dx%d", len(samples), config.height, config.width)

    model = build_model(config.model_config(), rng=spawn_rng(1))
    log.info("model parameters: %s", f"{count_parameters(model):,d}")
    optimizer = AdamW(list(model.named_parameters()), lr=config.lr,
                      weight_decay=config.weight_decay)

    batches_per_epoch = math.ceil(len(samples) / config.batch_size)
    total_steps = config.epochs * batches_per_epoch
    max_iters = config.max_iterations if config.max_iterations is not None else total_steps

    history_path = out / "history.csv"
    history_rows: list[dict] = []
    aux_cache = _AuxTargetCache()
    step = 0
    with open(history_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        writer.writeheader()
        model.train()
        for epoch in range(config.epochs):
            if step >= max_iters:
                break
            loader = PrefetchLoader(
                _epoch_batches(samples, config.batch_size, epoch, config.augment_flip)
            )
            for batch in loader:
                if step >= max_iters:
                    break
                lr = cosine_lr(min(step, total_steps), total_steps, config.lr)
                if config.warmup_steps and step < config.warmup_steps:
                    lr *= (step + 1) / config.warmup_steps
                rgb = Tensor(batch.rgb)
                adi = Tensor(batch.adi)
                output = model(rgb, adi)
                aux_targets = tuple(
                    np.stack([
                        aux_cache.get(fid, batch.target[i, 0], a.data.shape[-2:])
                        for i, fid in enumerate(batch.frame_ids)
                    ])[:, None]
                    for a in output.aux
                )
                bundle = bundle_from_output(output, batch.target,
                                            weights=config.aux_weights,
                                            alpha=config.focal_alpha,
                                            gamma=config.focal_gamma,
                                            aux_targets=aux_targets)
                loss, parts = total_loss(bundle)
                optimizer.zero_grad()
                loss.backward()
                if config.grad_clip:
                    _clip_gradients(optimizer.named_params, config.grad_clip)
                try:
                    optimizer.step(lr)
                except NonFiniteGradient as exc:
                    log.warning("iteration %d: %s", step, exc)
                row = {"iteration": step, "epoch": epoch, "lr": repr(lr)}
                row.update({k: repr(v) for k, v in parts.items()})
                writer.writerow(row)
                fh.flush()
                history_rows.append({"iteration": step, "epoch": epoch, "lr": lr, **parts})
                if step % 10 == 0:
                    log.info("iter %4d  epoch %3d  lr %.3e  loss %.4f", step, epoch, lr, parts["total"])
                step += 1
                if config.checkpoint_every and step % config.checkpoint_every == 0:
                    save_checkpoint(model, optimizer, out / f"checkpoint-{step:06d}.rfck",
                                    config=config.to_dict(),
                                    training_state={"iteration": step, "epoch": epoch})

    final_path = out / "checkpoint-final.rfck"
    save_checkpoint(model, optimizer, final_path, config=config.to_dict(),
                    training_state={"iteration": step})
    save_training_curves(history_rows, out / "training_curves.png")
    log.info("finished %d iterations; checkpoint at %s", step, final_path)
    return {
        "model": model,
        "iterations": step,
        "history": history_rows,
        "checkpoint": str(final_path),
        "history_csv": str(history_path),
    }


def predict_probabilities(model: RoadFusionNet, batch: Batch) -> np.ndarray:
    """Eval-mode road probabilities, [B, H, W] in [0, 1]."""
    model.eval()
    with no_grad():
        out = model(Tensor(batch.rgb), Tensor(batch.adi))
        prob = F.sigmoid(out.main)
    return prob.data[:, 0]


def evaluate_samples(model: RoadFusionNet, samples: Sequence[Sample],
                     batch_size: int = 2) -> tuple[MetricsReport, list[tuple[str, np.ndarray]]]:
    """Dataset-level sweep over aggregated confusion histograms.

    Also returns per-sample probability maps for rendering.
    """
    hist_pos = np.zeros(256, dtype=np.int64)
    hist_neg = np.zeros(256, dtype=np.int64)
    prob_maps: list[tuple[str, np.ndarray]] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        batch = batch_samples(chunk)
        probs = predict_probabilities(model, batch)
        for i, s in enumerate(chunk):
            pos, neg = quantized_histograms(probs[i], s.target, s.valid)
            hist_pos += pos
            hist_neg += neg
            prob_maps.append((s.frame_id, probs[i]))
    report = sweep_from_histograms(hist_pos, hist_neg)
    report.params = count_parameters(model)
    return report, prob_maps


def write_eval_artifacts(report: MetricsReport, out_dir: str | Path) -> None:
    """metrics text + JSON + per-threshold CSV + sweep figure."""
    import json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.txt").write_text(report.to_text() + "\n")
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    if report.curve is not None:
        with open(out / "threshold_curve.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "tp", "fp", "fn", "tn", "f1"])
            c = report.curve
            for i in range(len(c.thresholds)):
                writer.writerow([c.thresholds[i], c.tp[i], c.fp[i], c.fn[i], c.tn[i], repr(float(c.f1[i]))])
        save_threshold_curve(report.curve, out / "threshold_curve.png")
