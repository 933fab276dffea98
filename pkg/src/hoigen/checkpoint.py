"""Versioned binary checkpoints: JSON metadata (config echo) followed by named tensors.

Layout (little-endian)::

    magic  b"HOICKPT\\0"
    u32    version
    u32    metadata length, then UTF-8 JSON (sorted keys)
    u32    tensor count, then per tensor:
           u32 name length + UTF-8 name, u8 dtype code, u32 ndim, u32[ndim] shape, raw data
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import DependencyError, ParseError

MAGIC = b"HOICKPT\x00"
VERSION = 1
_DTYPES = {0: torch.float32, 1: torch.float64, 2: torch.int64}
_CODES = {v: k for k, v in _DTYPES.items()}
_NP = {0: "<f4", 1: "<f8", 2: "<i8"}


def to_bytes(tensors: dict[str, torch.Tensor], meta: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<II", VERSION, len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        t = tensors[name].detach().cpu()
        if t.dtype not in _CODES:
            t = t.to(torch.float32) if t.is_floating_point() else t.to(torch.int64)
        code = _CODES[t.dtype]
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BI", code, t.dim()))
        buf.write(struct.pack(f"<{t.dim()}I", *t.shape))
        buf.write(np.ascontiguousarray(t.numpy(), dtype=_NP[code]).tobytes())
    return buf.getvalue()


def from_bytes(data: bytes, source: str = "<bytes>") -> tuple[dict[str, torch.Tensor], dict]:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise ParseError(f"{source}: truncated checkpoint")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(8)) != MAGIC:
        raise ParseError(f"{source}: not a checkpoint")
    version, mlen = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ParseError(f"{source}: unsupported checkpoint version {version}")
    meta = json.loads(bytes(take(mlen)).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        code, ndim = struct.unpack("<BI", take(5))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(_NP[code]).itemsize
        arr = np.frombuffer(bytes(take(nbytes)), dtype=_NP[code]).reshape(shape)
        tensors[name] = torch.from_numpy(arr.copy()).to(_DTYPES[code])
    return tensors, meta


def optimizer_tensors(opt: torch.optim.Optimizer) -> tuple[dict[str, torch.Tensor], dict]:
    sd = opt.state_dict()
    tensors = {}
    for pid, st in sd["state"].items():
        for k, v in st.items():
            tensors[f"optim.{pid}.{k}"] = v if isinstance(v, torch.Tensor) else torch.tensor(v)
    return tensors, {"param_groups": sd["param_groups"]}


def load_optimizer(opt: torch.optim.Optimizer, tensors: dict[str, torch.Tensor], groups: dict) -> None:
    state: dict = {}
    for name, t in tensors.items():
        if not name.startswith("optim."):
            continue
        _, pid, key = name.split(".", 2)
        state.setdefault(int(pid), {})[key] = t
    opt.load_state_dict({"state": state, "param_groups": groups["param_groups"]})


def save(path, model: torch.nn.Module, meta: dict, optimizer: torch.optim.Optimizer | None = None) -> str:
    """Write a checkpoint; returns its sha256 hex digest."""
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    meta = dict(meta)
    if optimizer is not None:
        ot, groups = optimizer_tensors(optimizer)
        tensors.update(ot)
        meta["optimizer"] = groups
    data = to_bytes(tensors, meta)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load(path) -> tuple[dict[str, torch.Tensor], dict, dict[str, torch.Tensor]]:
    """Returns ``(model_state, meta, optimizer_tensors)``."""
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"checkpoint not found: {path}")
    tensors, meta = from_bytes(path.read_bytes(), str(path))
    model_state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    optim = {k: v for k, v in tensors.items() if k.startswith("optim.")}
    return model_state, meta, optim


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
