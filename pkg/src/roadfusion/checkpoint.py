"""Weight and checkpoint persistence.

One container format: an 8-byte magic, a length-prefixed JSON header whose
manifest lists tensor names/shapes/dtypes in registration order, then the
raw payload as little-endian float32. Saving a loaded file reproduces it
byte for byte. The same layout (ignoring the optimizer entries) is the
import format for externally converted encoder weights.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .nn import Module

__all__ = [
    "FORMAT_VERSION",
    "save_weights",
    "load_weights",
    "save_checkpoint",
    "load_checkpoint",
    "read_header",
]

MAGIC = b"ROADFUS1"
FORMAT_VERSION = 1


def _model_entries(model: Module) -> list[tuple[str, np.ndarray]]:
    entries = [(name, p.data) for name, p in model.named_parameters()]
    entries += [(f"buffer.{name}", buf) for name, buf in model.named_buffers()]
    return entries


def _write(path: Path, entries: list[tuple[str, np.ndarray]],
           training_state: Optional[dict], config: Optional[dict]) -> None:
    manifest = [
        {"name": name, "shape": list(arr.shape), "dtype": "float32"}
        for name, arr in entries
    ]
    header = {
        "format_version": FORMAT_VERSION,
        "tensors": manifest,
        "training_state": training_state,
        "config": config,
    }
    blob = json.dumps(header, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in entries:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path} is not a recognized checkpoint (bad magic {magic!r})")
        (length,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(length))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(
            f"unsupported checkpoint format version {header.get('format_version')} "
            f"(this build reads version {FORMAT_VERSION})"
        )
    return header


def _read(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    header = read_header(path)
    tensors: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        fh.seek(len(MAGIC))
        (length,) = struct.unpack("<Q", fh.read(8))
        fh.seek(len(MAGIC) + 8 + length)
        for entry in header["tensors"]:
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            buf = fh.read(count * 4)
            if len(buf) != count * 4:
                raise ValueError(f"truncated payload while reading tensor {entry['name']!r}")
            tensors[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(entry["shape"]).copy()
        if fh.read(1):
            raise ValueError("trailing bytes after the declared payload")
    return header, tensors


def _assign(model: Module, tensors: dict[str, np.ndarray], allow_extra: bool) -> None:
    for name, arr in _model_entries(model):
        if name not in tensors:
            raise ValueError(f"checkpoint is missing tensor {name!r}")
        incoming = tensors.pop(name)
        if tuple(incoming.shape) != tuple(arr.shape):
            raise ValueError(
                f"shape mismatch for tensor {name!r}: checkpoint {tuple(incoming.shape)}, "
                f"model {tuple(arr.shape)}"
            )
        arr[...] = incoming.astype(arr.dtype)
    if tensors and not allow_extra:
        raise ValueError(f"checkpoint holds unexpected tensor {sorted(tensors)[0]!r}")


def save_weights(model: Module, path: str | Path, config: Optional[dict] = None) -> None:
    _write(Path(path), _model_entries(model), None, config)


def load_weights(model: Module, path: str | Path) -> dict:
    header, tensors = _read(Path(path))
    _assign(model, tensors, allow_extra=False)
    return header


def save_checkpoint(model: Module, optimizer, path: str | Path,
                    config: Optional[dict] = None, training_state: Optional[dict] = None) -> None:
    entries = _model_entries(model)
    state = dict(training_state or {})
    if optimizer is not None:
        entries += [(f"optim.m.{name}", m) for name, m in optimizer.named_moments("m")]
        entries += [(f"optim.v.{name}", v) for name, v in optimizer.named_moments("v")]
        state["optimizer_step"] = optimizer.step_count
    _write(Path(path), entries, state, config)


def load_checkpoint(path: str | Path, model: Module, optimizer=None) -> dict:
    header, tensors = _read(Path(path))
    _assign(model, tensors, allow_extra=True)
    if optimizer is not None:
        for prefix, kind in (("optim.m.", "m"), ("optim.v.", "v")):
            for name, moment in optimizer.named_moments(kind):
                key = prefix + name
                if key not in tensors:
                    raise ValueError(f"checkpoint is missing optimizer tensor {key!r}")
                incoming = tensors[key]
                if tuple(incoming.shape) != tuple(moment.shape):
                    raise ValueError(f"shape mismatch for optimizer tensor {key!r}")
                moment[...] = incoming.astype(moment.dtype)
        state = header.get("training_state") or {}
        optimizer.step_count = int(state.get("optimizer_step", 0))
    return header
