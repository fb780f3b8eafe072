"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array plus an optional gradient buffer. Ops build a
DAG of closures; ``Tensor.backward()`` walks it in reverse topological order
and accumulates gradients into every reachable leaf with ``requires_grad``.
Element type follows the wrapped array: float32 for training/inference,
float64 for gradient checks.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "is_grad_enabled",
    "concat",
    "seed_all",
    "get_rng",
    "spawn_rng",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / data prep)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


# ---------------------------------------------------------------------------
# Seeded randomness: one root generator, children split off deterministically.
# ---------------------------------------------------------------------------

_ROOT_SEED = 0
_GLOBAL_RNG = np.random.default_rng(0)


def seed_all(seed: int) -> None:
    """Reset the process-wide generator. Every stochastic op draws from it."""
    global _ROOT_SEED, _GLOBAL_RNG
    _ROOT_SEED = int(seed)
    _GLOBAL_RNG = np.random.default_rng(_ROOT_SEED)


def get_rng() -> np.random.Generator:
    return _GLOBAL_RNG


def spawn_rng(key: int) -> np.random.Generator:
    """Independent child generator; (seed, key) fully determines its stream."""
    return np.random.default_rng(np.random.SeedSequence(entropy=_ROOT_SEED, spawn_key=(int(key),)))


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if not np.issubdtype(arr.dtype, np.floating):
        return arr.astype(np.float32)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum the gradient of a broadcast result back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._grad_fn: Optional[Callable[[np.ndarray], None]] = None

    # -- bookkeeping --------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g, owned: bool = False) -> None:
        """Add ``g`` into the gradient buffer.

        ``owned=True`` promises the caller freshly allocated ``g`` and holds
        no other reference, letting the first accumulation skip its copy.
        """
        if not self.requires_grad:
            return
        g = _unbroadcast(np.asarray(g, dtype=self.data.dtype), self.data.shape)
        if self.grad is None:
            if owned and g.flags.writeable:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- backward pass ------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every reachable leaf. Scalar outputs only.

        Gradients accumulate across calls; reset with ``zero_grad``.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar tensor, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(topo):
            if node._grad_fn is not None and node.grad is not None:
                node._grad_fn(node.grad)

    # -- operator sugar (implementations below) ------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other, self))

    def __rtruediv__(self, other):
        return div(_wrap(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, _wrap(other, self))

    def __getitem__(self, index):
        return narrow(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return power(self, 0.5)


def record(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap an op result, attaching the backward closure when the tape is live."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


# ---------------------------------------------------------------------------
# Arithmetic primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def grad_fn(g):
        a.accumulate_grad(g)
        b.accumulate_grad(g)

    return record(a.data + b.data, (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def grad_fn(g):
        a.accumulate_grad(g)
        b.accumulate_grad(-g, owned=True)

    return record(a.data - b.data, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def grad_fn(g):
        a.accumulate_grad(g * b.data, owned=True)
        b.accumulate_grad(g * a.data, owned=True)

    return record(a.data * b.data, (a, b), grad_fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    def grad_fn(g):
        a.accumulate_grad(g / b.data, owned=True)
        b.accumulate_grad(-g * a.data / (b.data * b.data), owned=True)

    return record(a.data / b.data, (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    def grad_fn(g):
        a.accumulate_grad(-g, owned=True)

    return record(-a.data, (a,), grad_fn)


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    exponent = float(exponent)
    out = a.data ** exponent

    def grad_fn(g):
        if exponent == 0.0:
            return  # constant one; avoids 0 * inf at zero inputs
        a.accumulate_grad(g * exponent * a.data ** (exponent - 1.0), owned=True)

    return record(out, (a,), grad_fn)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def grad_fn(g):
        a.accumulate_grad(g * out, owned=True)

    return record(out, (a,), grad_fn)


def log(a: Tensor) -> Tensor:
    def grad_fn(g):
        a.accumulate_grad(g / a.data, owned=True)

    return record(np.log(a.data), (a,), grad_fn)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def _expand_reduced(g: np.ndarray, axis, keepdims: bool, shape: tuple) -> np.ndarray:
    gg = np.asarray(g)
    if axis is not None and not keepdims:
        gg = np.expand_dims(gg, axis)
    return np.broadcast_to(gg, shape)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        a.accumulate_grad(_expand_reduced(g, axis, keepdims, a.data.shape))

    return record(out, (a,), grad_fn)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(out.size, 1) if out.size else a.data.size

    def grad_fn(g):
        a.accumulate_grad(_expand_reduced(g, axis, keepdims, a.data.shape) / count)

    return record(out, (a,), grad_fn)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.data.shape

    def grad_fn(g):
        a.accumulate_grad(np.asarray(g).reshape(old))

    return record(a.data.reshape(shape), (a,), grad_fn)


def permute(a: Tensor, axes: tuple) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def grad_fn(g):
        a.accumulate_grad(np.asarray(g).transpose(inverse))

    return record(a.data.transpose(axes), (a,), grad_fn)


def narrow(a: Tensor, index) -> Tensor:
    """Basic (slice / integer) indexing; gradient scatters back into place."""
    out = a.data[index]

    def grad_fn(g):
        buf = np.zeros_like(a.data)
        buf[index] = g
        a.accumulate_grad(buf, owned=True)

    return record(out, (a,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        g = np.asarray(g)
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, stop)
            t.accumulate_grad(g[tuple(sl)])

    return record(out, tuple(tensors), grad_fn)


def take_flat(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather from a flattened view; used to reorder margins after sorting."""
    indices = np.asarray(indices, dtype=np.int64)
    flat = a.data.reshape(-1)
    out = flat[indices]

    def grad_fn(g):
        buf = np.zeros(flat.shape, dtype=a.data.dtype)
        np.add.at(buf, indices, np.asarray(g).reshape(-1))
        a.accumulate_grad(buf.reshape(a.data.shape), owned=True)

    return record(out, (a,), grad_fn)


# ---------------------------------------------------------------------------
# Contraction
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the two trailing axes; leading axes broadcast."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul requires >=2-D operands, got {a.data.ndim}-D and {b.data.ndim}-D")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul inner dimensions differ: {a.data.shape[-1]} (lhs last) vs "
            f"{b.data.shape[-2]} (rhs second-to-last)"
        )
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        g = np.asarray(g)
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        a.accumulate_grad(_unbroadcast(ga, a.data.shape), owned=True)
        b.accumulate_grad(_unbroadcast(gb, b.data.shape), owned=True)

    return record(out, (a, b), grad_fn)
