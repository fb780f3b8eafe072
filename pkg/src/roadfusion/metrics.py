"""Pixel metrics (MaxF / PRE / REC / IoU), threshold sweeps, error-map
rendering and the forward-latency benchmark.

Dataset-level scores aggregate confusion counts over all images before the
threshold sweep, so results do not depend on image order. Probabilities are
quantized to 8 bits and all 256 thresholds are evaluated in one cumulative
pass; evaluation is in perspective view.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

__all__ = [
    "ConfusionCounts",
    "ThresholdCurve",
    "MetricsReport",
    "LatencyStats",
    "confusion_at",
    "quantized_histograms",
    "sweep_from_histograms",
    "maxf_sweep",
    "render_error_map",
    "bench_latency",
    "validate_report_dict",
]

N_THRESHOLDS = 256


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int
    threshold: float

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 0.0

    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    def iou(self) -> float:
        denom = self.tp + self.fp + self.fn
        return self.tp / denom if denom else 0.0


@dataclass
class ThresholdCurve:
    """Counts and F1 at each of the 256 quantized thresholds."""

    thresholds: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray
    f1: np.ndarray


@dataclass
class MetricsReport:
    maxf: float                      # percent, 2 decimals
    precision: float
    recall: float
    iou: float
    threshold: float
    curve: Optional[ThresholdCurve] = None
    params: Optional[int] = None
    latency: Optional["LatencyStats"] = None
    no_positive_truth: bool = False

    def to_dict(self) -> dict:
        d = {
            "maxf": self.maxf,
            "pre": self.precision,
            "rec": self.recall,
            "iou": self.iou,
            "threshold": self.threshold,
            "params": self.params,
            "fps_mean": self.latency.fps if self.latency else None,
        }
        if self.no_positive_truth:
            d["no_positive_truth"] = True
        return d

    def to_text(self) -> str:
        lines = [
            f"MaxF      {self.maxf:6.2f} %",
            f"PRE       {self.precision:6.2f} %",
            f"REC       {self.recall:6.2f} %",
            f"IoU       {self.iou:6.2f} %",
            f"threshold {self.threshold:.6f}",
        ]
        if self.params is not None:
            lines.append(f"params    {self.params:,d}")
        if self.latency is not None:
            lines.append(f"fps_mean  {self.latency.fps:.2f}")
        if self.no_positive_truth:
            lines.append("warning   no positive ground-truth pixels; recall reported as 0")
        return "\n".join(lines)


def _check_inputs(prob: np.ndarray, truth: np.ndarray, mask: Optional[np.ndarray]):
    prob = np.asarray(prob, dtype=np.float64)
    truth = np.asarray(truth)
    if mask is None:
        mask = np.ones(truth.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if prob.shape != truth.shape or prob.shape != mask.shape:
        raise ValueError(f"shape mismatch: prob {prob.shape}, truth {truth.shape}, mask {mask.shape}")
    if prob.size and (prob.min() < 0 or prob.max() > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    return prob, truth.astype(bool), mask


def confusion_at(prob: np.ndarray, truth: np.ndarray, mask: Optional[np.ndarray],
                 threshold: float) -> ConfusionCounts:
    """Counts over valid pixels with prediction = prob >= threshold."""
    prob, truth, mask = _check_inputs(prob, truth, mask)
    pred = prob >= threshold
    tp = int(np.count_nonzero(pred & truth & mask))
    fp = int(np.count_nonzero(pred & ~truth & mask))
    fn = int(np.count_nonzero(~pred & truth & mask))
    tn = int(np.count_nonzero(~pred & ~truth & mask))
    return ConfusionCounts(tp, fp, fn, tn, threshold)


def quantized_histograms(prob: np.ndarray, truth: np.ndarray,
                         mask: Optional[np.ndarray],
                         bins: int = N_THRESHOLDS) -> tuple[np.ndarray, np.ndarray]:
    """Quantized histograms of probabilities, split by ground-truth class.

    8-bit (256 bins) by default; finer grids are allowed. These are
    sufficient statistics for the whole threshold sweep and are additive
    across images.
    """
    prob, truth, mask = _check_inputs(prob, truth, mask)
    q = np.floor(prob * (bins - 1) + 0.5).astype(np.int64)
    pos = np.bincount(q[mask & truth], minlength=bins)
    neg = np.bincount(q[mask & ~truth], minlength=bins)
    return pos, neg


def sweep_from_histograms(hist_pos: np.ndarray, hist_neg: np.ndarray,
                          curve: bool = True) -> MetricsReport:
    """Evaluate every quantized threshold from class histograms; ties take
    the lowest threshold. Precision/recall/IoU are reported at the argmax."""
    bins = len(hist_pos)
    suffix_pos = np.cumsum(hist_pos[::-1])[::-1]  # counts with q >= k
    suffix_neg = np.cumsum(hist_neg[::-1])[::-1]
    P = int(hist_pos.sum())
    N = int(hist_neg.sum())
    tp = suffix_pos.astype(np.int64)
    fp = suffix_neg.astype(np.int64)
    fn = P - tp
    tn = N - fp
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    best = int(np.argmax(f1))  # first max = lowest threshold on ties
    thresholds = np.arange(bins) / (bins - 1)
    counts = ConfusionCounts(int(tp[best]), int(fp[best]), int(fn[best]), int(tn[best]),
                             thresholds[best])
    no_pos = P == 0
    report = MetricsReport(
        maxf=round(100.0 * counts.f1(), 2),
        precision=round(100.0 * counts.precision(), 2),
        recall=round(100.0 * counts.recall(), 2) if not no_pos else 0.0,
        iou=round(100.0 * counts.iou(), 2),
        threshold=thresholds[best],
        curve=ThresholdCurve(thresholds, tp, fp, fn, tn, f1) if curve else None,
        no_positive_truth=no_pos,
    )
    return report


def maxf_sweep(prob: np.ndarray, truth: np.ndarray, mask: Optional[np.ndarray] = None,
               bins: int = N_THRESHOLDS) -> MetricsReport:
    """Single-image (or pre-stacked) threshold sweep."""
    pos, neg = quantized_histograms(prob, truth, mask, bins)
    return sweep_from_histograms(pos, neg)


# ---------------------------------------------------------------------------
# Error maps
# ---------------------------------------------------------------------------

TP_COLOR = (0, 255, 0)
FP_COLOR = (255, 0, 0)
FN_COLOR = (0, 0, 255)
TN_DIM = 0.4


def render_error_map(prob: np.ndarray, truth: np.ndarray, mask: Optional[np.ndarray],
                     threshold: float, rgb: Optional[np.ndarray] = None
                     ) -> tuple[np.ndarray, ConfusionCounts]:
    """Classification raster: TP green, FP red, FN blue, TN the dimmed input."""
    prob, truth, mask = _check_inputs(prob, truth, mask)
    pred = prob >= threshold
    H, W = prob.shape
    if rgb is None:
        base = np.zeros((H, W, 3), dtype=np.float64)
    else:
        base = np.asarray(rgb, dtype=np.float64)
        if base.shape[:2] != (H, W):
            raise ValueError(f"context image extents {base.shape[:2]} do not match prob {prob.shape}")
    out = (base * TN_DIM).astype(np.uint8)
    out[mask & pred & truth] = TP_COLOR
    out[mask & pred & ~truth] = FP_COLOR
    out[mask & ~pred & truth] = FN_COLOR
    counts = confusion_at(prob, truth, mask, threshold)
    return out, counts


# ---------------------------------------------------------------------------
# Latency
# ---------------------------------------------------------------------------


@dataclass
class LatencyStats:
    mean_ms: float
    median_ms: float
    p95_ms: float
    fps: float
    warmup: int
    iters: int
    samples_ms: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mean_ms": self.mean_ms,
            "median_ms": self.median_ms,
            "p95_ms": self.p95_ms,
            "fps_mean": self.fps,
            "warmup": self.warmup,
            "iters": self.iters,
        }


def bench_latency(forward: Callable[[], object], warmup: int, iters: int) -> LatencyStats:
    """Wall-time of ``forward`` alone: inputs are prepared by the caller, so
    preprocessing and I/O are excluded by construction."""
    if iters <= 0:
        raise ValueError(f"iters must be positive, got {iters}")
    if warmup < 0:
        raise ValueError(f"warmup must be non-negative, got {warmup}")
    for _ in range(warmup):
        forward()
    samples = []
    for _ in range(iters):
        t0 = time.perf_counter()
        forward()
        samples.append((time.perf_counter() - t0) * 1000.0)
    arr = np.asarray(samples)
    mean = float(arr.mean())
    return LatencyStats(
        mean_ms=mean,
        median_ms=float(np.median(arr)),
        p95_ms=float(np.percentile(arr, 95)),
        fps=1000.0 / mean,
        warmup=warmup,
        iters=iters,
        samples_ms=samples,
    )


# ---------------------------------------------------------------------------
# Report schema
# ---------------------------------------------------------------------------

_REPORT_KEYS = {
    "maxf": (int, float),
    "pre": (int, float),
    "rec": (int, float),
    "iou": (int, float),
    "threshold": (int, float),
    "params": (int, type(None)),
    "fps_mean": (int, float, type(None)),
}


def validate_report_dict(d: dict) -> None:
    """Raise if the serialized report is missing keys or mistyped."""
    for key, types in _REPORT_KEYS.items():
        if key not in d:
            raise ValueError(f"report is missing required key {key!r}")
        if not isinstance(d[key], types):
            raise ValueError(f"report key {key!r} has type {type(d[key]).__name__}")
    for key in ("maxf", "pre", "rec", "iou"):
        if not 0.0 <= float(d[key]) <= 100.0:
            raise ValueError(f"report key {key!r} out of range: {d[key]}")


_LATENCY_KEYS = {
    "mean_ms": (int, float),
    "median_ms": (int, float),
    "p95_ms": (int, float),
    "fps_mean": (int, float),
    "warmup": (int,),
    "iters": (int,),
    "params": (int,),
    "height": (int,),
    "width": (int,),
    "batch": (int,),
}


def validate_latency_dict(d: dict) -> None:
    """Raise if a serialized benchmark report is missing keys or mistyped."""
    for key, types in _LATENCY_KEYS.items():
        if key not in d:
            raise ValueError(f"latency report is missing required key {key!r}")
        if not isinstance(d[key], types):
            raise ValueError(f"latency report key {key!r} has type {type(d[key]).__name__}")
    if d["p95_ms"] < d["median_ms"] - 1e-9 or d["median_ms"] < 0:
        raise ValueError("latency order statistics are inconsistent")
