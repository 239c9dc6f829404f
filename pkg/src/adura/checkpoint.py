"""Binary checkpoint format.

Layout (all integers and floats little-endian)::

    b"ADUR"  u32 version
    u32 entry count, then per entry:
        u32 name length, name (utf-8), u32 rank, u64 dims[rank], f64 values[n]
    sections, each: 4-byte tag, u64 payload length, payload
        OPTM  u64 step, u32 count, entries (first moments "m:<name>", second "v:<name>")
        RNGS  JSON bit-generator state
        CONF  JSON resolved configuration
        TRNR  JSON trainer bookkeeping (epoch, best score)
        END!  empty, marks a complete file

Model entries hold parameters followed by batch-norm running statistics.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ShapeError

MAGIC = b"ADUR"
VERSION = 1
_END = b"END!"


@dataclass
class Checkpoint:
    entries: dict
    optimizer: dict | None = None
    rng_state: dict | None = None
    config: dict = field(default_factory=dict)
    trainer: dict = field(default_factory=dict)


def _pack_entries(entries):
    out = [struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos} (wanted {n} more)")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def entries(self):
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (nlen,) = self.unpack("<I")
            try:
                name = self.take(nlen).decode("utf-8")
            except UnicodeDecodeError:
                raise CheckpointError(f"{self.path}: corrupt entry name at byte {self.pos}") from None
            (rank,) = self.unpack("<I")
            if rank > 8:
                raise CheckpointError(f"{self.path}: implausible rank {rank} for {name!r}")
            dims = self.unpack(f"<{rank}Q")
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            out[name] = np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
        return out


def to_bytes(ckpt):
    parts = [MAGIC, struct.pack("<I", VERSION), _pack_entries(ckpt.entries)]

    def section(tag, payload):
        parts.append(tag + struct.pack("<Q", len(payload)) + payload)

    if ckpt.optimizer is not None:
        opt = ckpt.optimizer
        moments = {f"m:{k}": v for k, v in opt["m"].items()}
        moments.update({f"v:{k}": v for k, v in opt["v"].items()})
        section(b"OPTM", struct.pack("<Q", int(opt["step"])) + _pack_entries(moments))
    if ckpt.rng_state is not None:
        section(b"RNGS", json.dumps(ckpt.rng_state, sort_keys=True).encode("utf-8"))
    section(b"CONF", json.dumps(ckpt.config, sort_keys=True).encode("utf-8"))
    section(b"TRNR", json.dumps(ckpt.trainer, sort_keys=True).encode("utf-8"))
    section(_END, b"")
    return b"".join(parts)


def from_bytes(buf, path="<bytes>"):
    r = _Reader(buf, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    ckpt = Checkpoint(entries=r.entries())
    while True:
        tag = r.take(4)
        (length,) = r.unpack("<Q")
        payload = r.take(length)
        if tag == _END:
            break
        if tag == b"OPTM":
            sub = _Reader(payload, path)
            (step,) = sub.unpack("<Q")
            moments = sub.entries()
            ckpt.optimizer = {
                "step": step,
                "m": {k[2:]: v for k, v in moments.items() if k.startswith("m:")},
                "v": {k[2:]: v for k, v in moments.items() if k.startswith("v:")},
            }
        elif tag in (b"RNGS", b"CONF", b"TRNR"):
            try:
                value = json.loads(payload.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise CheckpointError(f"{path}: corrupt {tag.decode()} section ({exc})") from None
            if tag == b"RNGS":
                ckpt.rng_state = value
            elif tag == b"CONF":
                ckpt.config = value
            else:
                ckpt.trainer = value
        else:
            raise CheckpointError(f"{path}: unknown section {tag!r}")
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after end marker")
    return ckpt


def save_checkpoint(path, ckpt):
    path = Path(path)
    data = to_bytes(ckpt)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def load_checkpoint(path):
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror or exc}") from None
    return from_bytes(buf, str(path))


def model_entries(model):
    """Parameters then buffers, in a fixed order, as copies."""
    out = {name: t.data.copy() for name, t in model.named_parameters()}
    out.update({f"buffer:{name}": np.array(v, dtype=np.float64) for name, v in model.named_buffers()})
    return out


def load_model_entries(model, entries):
    """Copy checkpoint entries into ``model``; names and shapes must match."""
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    expected = set(params) | {f"buffer:{n}" for n in buffers}
    if set(entries) != expected:
        missing = sorted(expected - set(entries))
        extra = sorted(set(entries) - expected)
        raise ShapeError("checkpoint", (len(entries),), (len(expected),), detail=f"missing {missing[:3]} unexpected {extra[:3]}")
    for name, t in params.items():
        if entries[name].shape != t.shape:
            raise ShapeError("checkpoint", entries[name].shape, t.shape, detail=name)
        t.data = entries[name].copy()
    for name, v in buffers.items():
        arr = entries[f"buffer:{name}"]
        if arr.shape != np.shape(v):
            raise ShapeError("checkpoint", arr.shape, np.shape(v), detail=name)
        model.set_buffer(name, arr.copy())
