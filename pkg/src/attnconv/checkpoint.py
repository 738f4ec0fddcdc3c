"""Binary named-tensor checkpoints.

Layout (little-endian)::

    b"ATCK" | version u32 | count u32
    count x [ name_len u16 | name utf-8 | rank u8 | dims u32 x rank | dtype u8 | raw values ]
    meta_len u32 | meta JSON (utf-8)

dtype codes: 0 = float32, 1 = float64, 2 = int64.
"""
from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ATCK"
VERSION = 1
VELOCITY_PREFIX = "optimizer.velocity."
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype(v).newbyteorder("="): k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: OrderedDict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def velocities(self) -> dict[str, np.ndarray]:
        n = len(VELOCITY_PREFIX)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(VELOCITY_PREFIX)}


def config_digest(obj) -> str:
    text = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def write_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype.newbyteorder("="))
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(struct.pack("<B", code))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(blob)) + blob)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise CheckpointError(
                f"truncated checkpoint while reading {what}: expected at least {end} bytes, got {len(self.buf)}"
            )
        out = self.buf[self.pos : end]
        self.pos = end
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an ATCK checkpoint")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "name").decode("utf-8")
        (rank,) = r.unpack("<B", f"{name} rank")
        dims = r.unpack(f"<{rank}I", f"{name} dims")
        (code,) = r.unpack("<B", f"{name} dtype")
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        data = np.frombuffer(r.take(nbytes, f"{name} values"), dtype=dt).reshape(dims)
        tensors[name] = data.astype(dt.newbyteorder("="), copy=True)
    (mlen,) = r.unpack("<I", "metadata length")
    meta = json.loads(r.take(mlen, "metadata").decode("utf-8"))
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: {len(r.buf) - r.pos} trailing bytes after metadata")
    return Checkpoint(tensors, meta)


def save_checkpoint(path, model, state=None, meta: dict | None = None) -> None:
    """Write all parameters, batch-norm running stats and (optionally) velocities."""
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, p in model.named_parameters().items():
        tensors[name] = p.data
    tensors.update(model.named_buffers())
    if state is not None:
        for name, v in state.velocity.items():
            tensors[VELOCITY_PREFIX + name] = v
    write_checkpoint(path, tensors, meta)


def load_checkpoint(path) -> Checkpoint:
    return read_checkpoint(path)


@dataclass
class LoadReport:
    loaded: list[str]
    unknown: list[str]
    missing: list[str]
    reinitialized: list[str]


def load_into(model, ckpt: Checkpoint, reinit_head: bool = False, strict: bool = True,
              seed: int = 0) -> LoadReport:
    """Copy checkpoint tensors into ``model`` by name.

    Shape mismatches are always fatal and listed together. With
    ``reinit_head`` the classifier is drawn fresh instead (the transfer
    path, which tolerates a different class count). Unknown names abort the
    load unless ``strict`` is False.
    """
    params = model.named_parameters()
    buffers = model.named_buffers()
    skip = {n for n in params if n.startswith("classifier.")} if reinit_head else set()
    tensors = {k: v for k, v in ckpt.tensors.items() if not k.startswith(VELOCITY_PREFIX)}

    unknown = [k for k in tensors if k not in params and k not in buffers and k not in skip
               and not (reinit_head and k.startswith("classifier."))]
    mismatched = []
    for name, arr in tensors.items():
        if name in skip:
            continue
        target = params[name].data if name in params else buffers.get(name)
        if target is not None and target.shape != arr.shape:
            mismatched.append(f"{name} (checkpoint {arr.shape} vs model {target.shape})")
    if mismatched:
        raise CheckpointError("shape mismatch: " + "; ".join(mismatched))
    if unknown and strict:
        raise CheckpointError("unknown tensors in checkpoint: " + ", ".join(unknown))

    loaded = []
    for name, arr in tensors.items():
        if name in skip:
            continue
        if name in params:
            params[name].data = arr.astype(model.dtype, copy=True)
            loaded.append(name)
        elif name in buffers:
            model.set_buffer(name, arr)
            loaded.append(name)
    reinit = []
    if reinit_head:
        model.init_classifier(np.random.default_rng([seed, 1]))
        reinit = [n for n in model.named_parameters() if n.startswith("classifier.")]
    missing = [n for n in list(params) + list(buffers) if n not in loaded and n not in reinit]
    return LoadReport(loaded, unknown, missing, reinit)
