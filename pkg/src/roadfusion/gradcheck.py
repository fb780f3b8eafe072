"""Central finite-difference verification of analytic gradients.

Runs in float64 with h = 1e-4. Used by the test suite on every
differentiable op and composite block.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

__all__ = ["numerical_gradient", "max_relative_error", "check_gradients"]


def numerical_gradient(fn: Callable[[], Tensor], leaf: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central differences of a scalar-valued ``fn`` w.r.t. one leaf tensor."""
    base = leaf.data
    grad = np.zeros_like(base, dtype=np.float64)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = fn().item()
        flat[i] = orig - h
        lo = fn().item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest deviation relative to the gradient's own magnitude.

    The floor keeps near-zero true gradients from amplifying central-difference
    round-off (~ulp(loss)/h) into spurious relative error; deviations above
    floor * tol are still caught as absolute errors.
    """
    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)), 1e-3)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def check_gradients(
    fn: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    h: float = 1e-4,
    tol: float = 1e-4,
) -> float:
    """Assert analytic vs numeric agreement for every leaf; returns worst error.

    ``fn`` must rebuild the graph from the leaves on every call (their data
    is perturbed in place between evaluations).
    """
    for leaf in leaves:
        if leaf.data.dtype != np.float64:
            raise ValueError("gradient checks require float64 leaves")
        leaf.zero_grad()
    loss = fn()
    loss.backward()
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data)
        numeric = numerical_gradient(fn, leaf, h=h)
        err = max_relative_error(analytic, numeric)
        worst = max(worst, err)
        if err > tol:
            raise AssertionError(
                f"gradient mismatch: relative error {err:.3e} > {tol:.1e} "
                f"for leaf of shape {leaf.data.shape}"
            )
    return worst
