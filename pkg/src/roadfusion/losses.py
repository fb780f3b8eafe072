"""Training objective: BCE + Lovász hinge + 0.5 * focal, on the main output
and (down-weighted) on each auxiliary output against nearest-downsampled
ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import functional as F
from .decoder import SegmentationOutput
from .tensor import Tensor, take_flat

__all__ = [
    "bce_loss",
    "focal_loss",
    "lovasz_hinge_loss",
    "downsample_labels",
    "SupervisionBundle",
    "bundle_from_output",
    "combined_loss",
    "total_loss",
]

AUX_WEIGHTS = (0.5, 0.3, 0.2)  # deep to shallow
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


def _as_target(targets, like: Tensor) -> Tensor:
    if isinstance(targets, Tensor):
        return targets.detach()
    return Tensor(np.asarray(targets, dtype=like.data.dtype))


def _cross_entropy_terms(logits: Tensor, y: Tensor) -> Tensor:
    """Per-pixel -log p_t in the overflow-free softplus form."""
    return y * F.softplus(-logits) + (1.0 - y) * F.softplus(logits)


def bce_loss(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy from logits."""
    y = _as_target(targets, logits)
    return _cross_entropy_terms(logits, y).mean()


def focal_loss(logits: Tensor, targets, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> Tensor:
    """Mean of alpha_t * (1 - p_t)^gamma * (-log p_t).

    With gamma=0 and alpha=0.5 this reduces to 0.5 * bce_loss exactly (the
    modulating factor becomes the constant one and the same softplus terms
    are reused).
    """
    y = _as_target(targets, logits)
    ce = _cross_entropy_terms(logits, y)
    p = F.sigmoid(logits)
    miss = y + p - 2.0 * p * y          # = 1 - p_t
    alpha_t = alpha * y + (1.0 - alpha) * (1.0 - y)
    return (alpha_t * miss ** gamma * ce).mean()


def _jaccard_gradient(gt_sorted: np.ndarray) -> np.ndarray:
    """Discrete gradient of the Jaccard extension along sorted errors."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_hinge_loss(logits: Tensor, targets) -> Tensor:
    """Lovász extension of the Jaccard loss over hinge errors.

    Computed per image over the flattened pixels, then averaged across the
    batch. Sort ties are broken by original pixel index. Images with no
    foreground are driven by their false positives (the empty-class
    extension assigns weight one to the largest error).
    """
    y = _as_target(targets, logits)
    B = logits.data.shape[0] if logits.data.ndim >= 2 else 1
    flat_logits = logits.reshape(B, -1)
    flat_y = y.data.reshape(B, -1)
    if flat_y.shape[1] == 0:
        raise ValueError("lovasz hinge needs at least one pixel")
    per_image = []
    for b in range(B):
        yb = flat_y[b]
        sign = 2.0 * yb - 1.0
        margins = 1.0 - flat_logits[b] * Tensor(np.asarray(sign, dtype=logits.data.dtype))
        order = np.argsort(-margins.data, kind="stable")
        sorted_margins = take_flat(margins, order)
        grad = _jaccard_gradient(yb[order]).astype(logits.data.dtype)
        per_image.append((F.relu(sorted_margins) * Tensor(grad)).sum())
    total = per_image[0]
    for term in per_image[1:]:
        total = total + term
    return total * (1.0 / B)


def downsample_labels(y: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor label downsampling (keeps the {0,1} domain)."""
    H, W = y.shape[-2], y.shape[-1]
    h, w = int(size[0]), int(size[1])
    rows = np.minimum((np.arange(h) + 0.5) * (H / h), H - 1).astype(np.int64)
    cols = np.minimum((np.arange(w) + 0.5) * (W / w), W - 1).astype(np.int64)
    return y[..., rows[:, None], cols[None, :]]


@dataclass
class SupervisionBundle:
    """Everything the composite objective consumes for one batch."""

    main_logits: Tensor
    aux_logits: tuple[Tensor, ...]
    target: np.ndarray                       # [B,1,H,W] or [B,H,W] binary
    aux_targets: tuple[np.ndarray, ...]
    weights: tuple[float, ...] = AUX_WEIGHTS
    alpha: float = FOCAL_ALPHA
    gamma: float = FOCAL_GAMMA

    def __post_init__(self):
        if len(self.aux_logits) != len(self.aux_targets) or len(self.aux_logits) != len(self.weights):
            raise ValueError("aux logits, targets and weights must align")
        for k, (logit, tgt) in enumerate(zip(self.aux_logits, self.aux_targets)):
            if logit.data.shape[-2:] != tgt.shape[-2:]:
                raise ValueError(
                    f"aux target {k} extents {tgt.shape[-2:]} do not match logits {logit.data.shape[-2:]}"
                )


def bundle_from_output(output: SegmentationOutput, target: np.ndarray,
                       weights=AUX_WEIGHTS, alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA,
                       aux_targets: Optional[Sequence[np.ndarray]] = None) -> SupervisionBundle:
    if output.aux is None:
        raise ValueError("supervision bundle needs auxiliary outputs; run the model in training mode")
    if aux_targets is None:
        aux_targets = tuple(
            downsample_labels(target, a.data.shape[-2:]) for a in output.aux
        )
    return SupervisionBundle(output.main, tuple(output.aux), target, tuple(aux_targets),
                             tuple(weights), alpha, gamma)


def combined_loss(logits: Tensor, targets, alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA) -> dict[str, Tensor]:
    parts = {
        "bce": bce_loss(logits, targets),
        "lovasz": lovasz_hinge_loss(logits, targets),
        "focal": focal_loss(logits, targets, alpha, gamma),
    }
    parts["combined"] = parts["bce"] + parts["lovasz"] + 0.5 * parts["focal"]
    return parts


def total_loss(bundle: SupervisionBundle) -> tuple[Tensor, dict[str, float]]:
    """Main combination plus weighted aux combinations; returns the scalar
    and a float breakdown for logging."""
    main = combined_loss(bundle.main_logits, bundle.target, bundle.alpha, bundle.gamma)
    total = main["combined"]
    log = {
        "bce": main["bce"].item(),
        "lovasz": main["lovasz"].item(),
        "focal": main["focal"].item(),
        "main": main["combined"].item(),
    }
    for k, (w, logits, tgt) in enumerate(zip(bundle.weights, bundle.aux_logits, bundle.aux_targets), 1):
        aux = combined_loss(logits, tgt, bundle.alpha, bundle.gamma)
        total = total + w * aux["combined"]
        log[f"aux{k}"] = aux["combined"].item()
    log["total"] = total.item()
    return total, log
