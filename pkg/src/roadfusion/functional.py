"""Differentiable neural-network kernels on top of the tensor engine.

Convolution is direct im2col + one batched BLAS matmul (grouped included);
no FFT or Winograd paths, so results are deterministic for fixed inputs.
"""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.special import erf, expit

from .tensor import Tensor, get_rng, record

__all__ = [
    "relu",
    "relu6",
    "sigmoid",
    "hard_sigmoid",
    "hard_swish",
    "gelu",
    "softplus",
    "activation",
    "softmax",
    "conv2d",
    "conv_output_extent",
    "bilinear_resize",
    "adaptive_avg_pool2d",
    "global_avg_pool",
    "dropout2d",
]


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0)

    def grad_fn(g):
        x.accumulate_grad(np.where(mask, g, 0), owned=True)

    return record(out, (x,), grad_fn)


def relu6(x: Tensor) -> Tensor:
    out = np.clip(x.data, 0, 6)
    mask = (x.data > 0) & (x.data < 6)

    def grad_fn(g):
        x.accumulate_grad(np.where(mask, g, 0), owned=True)

    return record(out, (x,), grad_fn)


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)

    def grad_fn(g):
        x.accumulate_grad(g * out * (1 - out), owned=True)

    return record(out, (x,), grad_fn)


def hard_sigmoid(x: Tensor) -> Tensor:
    """Piecewise-linear sigmoid: clip((x + 3) / 6, 0, 1)."""
    out = np.clip((x.data + 3) / 6, 0, 1)
    mask = (x.data > -3) & (x.data < 3)

    def grad_fn(g):
        x.accumulate_grad(np.where(mask, g / 6, 0), owned=True)

    return record(out, (x,), grad_fn)


def hard_swish(x: Tensor) -> Tensor:
    hs = np.clip((x.data + 3) / 6, 0, 1)
    out = x.data * hs
    inner = (x.data > -3) & (x.data < 3)

    def grad_fn(g):
        local = hs + np.where(inner, x.data / 6, 0)
        x.accumulate_grad(g * local, owned=True)

    return record(out, (x,), grad_fn)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian error linear unit: x * Phi(x), erf-based."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def grad_fn(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        x.accumulate_grad(g * (cdf + x.data * pdf), owned=True)

    return record(out, (x,), grad_fn)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)) in the overflow-free form."""
    out = np.maximum(x.data, 0) + np.log1p(np.exp(-np.abs(x.data)))

    def grad_fn(g):
        x.accumulate_grad(g * expit(x.data), owned=True)

    return record(out, (x,), grad_fn)


_ACTIVATIONS = {
    "relu": relu,
    "relu6": relu6,
    "hard_swish": hard_swish,
    "hard_sigmoid": hard_sigmoid,
    "gelu": gelu,
    "sigmoid": sigmoid,
}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation kind {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``; rows sum to one."""
    out = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        gs = (g * out).sum(axis=axis, keepdims=True)
        x.accumulate_grad(out * (g - gs), owned=True)

    return record(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride=1,
    padding=0,
    groups: int = 1,
) -> Tensor:
    """2-D convolution. ``weight`` is [Cout, Cin/groups, kh, kw].

    groups == Cin with Cout a multiple of Cin gives the depthwise case.
    """
    if x.data.ndim != 4:
        raise ValueError(f"conv2d expects a 4-D input [B,C,H,W], got shape {x.data.shape}")
    if weight.data.ndim != 4:
        raise ValueError(f"conv2d expects a 4-D weight [Cout,Cin/groups,kh,kw], got shape {weight.data.shape}")
    B, C, H, W = x.data.shape
    Cout, Cg_w, kh, kw = weight.data.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if C % groups or Cout % groups:
        raise ValueError(f"channels not divisible by groups: in={C}, out={Cout}, groups={groups}")
    Cg = C // groups
    if Cg != Cg_w:
        raise ValueError(
            f"weight channel dimension mismatch: weight has {Cg_w} input channels per group, "
            f"input provides {Cg} ({C} channels / {groups} groups)"
        )
    Ho = conv_output_extent(H, kh, sh, ph)
    Wo = conv_output_extent(W, kw, sw, pw)
    if Ho <= 0 or Wo <= 0:
        raise ValueError(
            f"empty convolution output {Ho}x{Wo} for input {H}x{W}, kernel {kh}x{kw}, "
            f"stride {sh}x{sw}, padding {ph}x{pw}"
        )
    if bias is not None and bias.data.shape != (Cout,):
        raise ValueError(f"bias shape {bias.data.shape} does not match output channels ({Cout},)")

    xp = x.data
    if ph or pw:
        xp = np.pad(xp, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    Hp, Wp = xp.shape[2], xp.shape[3]
    G = groups
    Cog = Cout // G
    N = Ho * Wo
    K = Cg * kh * kw

    sB, sC, sH, sW = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp,
        shape=(B, C, kh, kw, Ho, Wo),
        strides=(sB, sC, sH, sW, sh * sH, sw * sW),
        writeable=False,
    )
    # one copy: [B, G, Cg*kh*kw, Ho*Wo]
    cols = patches.reshape(B, G, Cg, kh, kw, Ho, Wo).reshape(B, G, K, N)
    wmat = weight.data.reshape(G, Cog, K)
    out = np.matmul(wmat[None], cols)  # [B, G, Cog, N]
    out = out.reshape(B, Cout, Ho, Wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        g = np.ascontiguousarray(g)
        gog = g.reshape(B, G, Cog, N)
        if weight.requires_grad:
            gw = np.matmul(gog, cols.transpose(0, 1, 3, 2)).sum(axis=0)
            weight.accumulate_grad(gw.reshape(weight.data.shape), owned=True)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)), owned=True)
        if x.requires_grad:
            gcols = np.matmul(wmat.transpose(0, 2, 1)[None], gog)  # [B, G, K, N]
            gc = gcols.reshape(B, C, kh, kw, Ho, Wo)
            gx = np.zeros((B, C, Hp, Wp), dtype=x.data.dtype)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i : i + sh * Ho : sh, j : j + sw * Wo : sw] += gc[:, :, i, j]
            if ph or pw:
                gx = gx[:, :, ph : Hp - ph or None, pw : Wp - pw or None]
            x.accumulate_grad(gx, owned=True)

    return record(out, parents, grad_fn)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def _interp_matrix(in_size: int, out_size: int, dtype_name: str) -> sparse.csr_matrix:
    """Sparse [out, in] linear-resampling operator sampling at pixel centers."""
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    i0f = np.floor(src)
    frac = src - i0f
    i0 = np.clip(i0f.astype(np.int64), 0, in_size - 1)
    i1 = np.clip(i0f.astype(np.int64) + 1, 0, in_size - 1)
    rows = np.repeat(np.arange(out_size), 2)
    cols = np.stack([i0, i1], axis=1).reshape(-1)
    vals = np.stack([1.0 - frac, frac], axis=1).reshape(-1).astype(dtype_name)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(out_size, in_size))


@lru_cache(maxsize=None)
def _interp_pair(in_size: int, out_size: int, dtype_name: str):
    A = _interp_matrix(in_size, out_size, dtype_name)
    return A, A.T.tocsr()


def _apply_rows(A: sparse.csr_matrix, x: np.ndarray) -> np.ndarray:
    """A @ x along axis 2 of [B,C,H,W]."""
    B, C, H, W = x.shape
    flat = np.ascontiguousarray(np.moveaxis(x, 2, 0)).reshape(H, -1)
    out = A @ flat
    return np.moveaxis(out.reshape(A.shape[0], B, C, W), 0, 2)


def _apply_cols(A: sparse.csr_matrix, x: np.ndarray) -> np.ndarray:
    """x @ A.T along axis 3 of [B,C,H,W]."""
    B, C, H, W = x.shape
    out = A @ x.reshape(-1, W).T
    return np.ascontiguousarray(out.T).reshape(B, C, H, A.shape[0])


def bilinear_resize(x: Tensor, size: Sequence[int]) -> Tensor:
    """Bilinear resample of [B,C,H,W] to ``size`` (Ho, Wo), sampling at pixel centers."""
    if x.data.ndim != 4:
        raise ValueError(f"bilinear_resize expects 4-D input, got shape {x.data.shape}")
    Ho, Wo = int(size[0]), int(size[1])
    if Ho < 1 or Wo < 1:
        raise ValueError(f"target extents must be >= 1, got {Ho}x{Wo}")
    B, C, H, W = x.data.shape
    if (Ho, Wo) == (H, W):
        def identity_grad(g):
            x.accumulate_grad(g)

        return record(x.data.copy(), (x,), identity_grad)

    dtype_name = x.data.dtype.name
    Ah, AhT = _interp_pair(H, Ho, dtype_name)
    Aw, AwT = _interp_pair(W, Wo, dtype_name)
    out = _apply_cols(Aw, _apply_rows(Ah, x.data))

    def grad_fn(g):
        g = np.asarray(g, dtype=x.data.dtype)
        x.accumulate_grad(_apply_rows(AhT, _apply_cols(AwT, g)), owned=True)

    return record(out, (x,), grad_fn)


def _pool_matrix(in_size: int, out_size: int, dtype) -> np.ndarray:
    """Averaging matrix [out, in] over near-even windows (adaptive pooling)."""
    P = np.zeros((out_size, in_size), dtype=dtype)
    for i in range(out_size):
        start = (i * in_size) // out_size
        stop = -(-((i + 1) * in_size) // out_size)  # ceil division
        P[i, start:stop] = 1.0 / (stop - start)
    return P


def adaptive_avg_pool2d(x: Tensor, output_size) -> Tensor:
    """Average-pool [B,C,H,W] down to the requested grid."""
    oh, ow = _pair(output_size)
    B, C, H, W = x.data.shape
    Ph = _pool_matrix(H, oh, x.data.dtype)
    Pw = _pool_matrix(W, ow, x.data.dtype)
    out = np.matmul(np.matmul(Ph, x.data), Pw.T)

    def grad_fn(g):
        x.accumulate_grad(np.matmul(np.matmul(Ph.T, np.asarray(g)), Pw), owned=True)

    return record(out, (x,), grad_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial extent, keeping [B,C,1,1]."""
    return x.mean(axis=(2, 3), keepdims=True)


def dropout2d(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Zero whole channels with probability ``p``; survivors rescaled by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        def identity_grad(g):
            x.accumulate_grad(g)

        return record(x.data.copy(), (x,), identity_grad)
    gen = rng if rng is not None else get_rng()
    B, C = x.data.shape[:2]
    keep = (gen.random((B, C)) >= p).astype(x.data.dtype)
    scale = keep / (1.0 - p)
    scale = scale.reshape(B, C, *([1] * (x.data.ndim - 2)))
    out = x.data * scale

    def grad_fn(g):
        x.accumulate_grad(np.asarray(g) * scale, owned=True)

    return record(out, (x,), grad_fn)
