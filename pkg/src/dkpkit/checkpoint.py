"""Binary checkpoints: magic "DKPC", version 1, little-endian throughout.

Layout after the 8-byte header (magic + u32 version):

    u32 config length, config text (utf-8)
    u32 meta length, meta json (sorted keys; step, rng state, schedules, ...)
    u64 tensor count, then per tensor:
        u32 name length, name, u32 rank, u32 dims..., f32 payload (row-major)
    u64 overlay count, then per overlay:
        u32 name length, name, u32 rows, u32 cols,
        u64 nnz, then nnz triples of (u32 row, u32 col, f32 value)
    u64 optimizer-slot count, encoded like tensors

Tensors are stored at 32-bit precision.  Loading reads the whole file before
constructing anything, so a truncated or corrupt file yields an error and no
partial state, and re-saving an unmodified load is byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"DKPC"
VERSION = 1
_TRIPLE = np.dtype([("row", "<u4"), ("col", "<u4"), ("value", "<f4")])


class CheckpointError(Exception):
    """Unreadable, truncated or version-incompatible checkpoint."""


@dataclass
class OverlayRecord:
    """Coordinate-list form of a masked matrix; rows sorted row-major."""

    rows: int
    cols: int
    coo_rows: np.ndarray   # u32
    coo_cols: np.ndarray   # u32
    values: np.ndarray     # f64 in memory, f32 on disk

    def to_dense(self) -> tuple[np.ndarray, np.ndarray]:
        """(values, mask) dense pair."""
        dense = np.zeros((self.rows, self.cols))
        mask = np.zeros((self.rows, self.cols), dtype=bool)
        dense[self.coo_rows, self.coo_cols] = self.values
        mask[self.coo_rows, self.coo_cols] = True
        return dense, mask

    @classmethod
    def from_dense(cls, values: np.ndarray, mask: np.ndarray) -> "OverlayRecord":
        r, c = np.nonzero(mask)
        return cls(rows=values.shape[0], cols=values.shape[1],
                   coo_rows=r.astype(np.uint32), coo_cols=c.astype(np.uint32),
                   values=values[r, c].astype(np.float32).astype(np.float64))


@dataclass
class Checkpoint:
    config_text: str
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    overlays: dict[str, OverlayRecord] = field(default_factory=dict)
    opt_slots: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def u32(self, v: int):
        self.parts.append(struct.pack("<I", v))

    def u64(self, v: int):
        self.parts.append(struct.pack("<Q", v))

    def raw(self, b: bytes):
        self.parts.append(b)

    def string(self, s: str):
        b = s.encode("utf-8")
        self.u32(len(b))
        self.raw(b)

    def tensor(self, name: str, arr: np.ndarray):
        self.string(name)
        self.u32(arr.ndim)
        for d in arr.shape:
            self.u32(d)
        self.raw(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def tensor(self) -> tuple[str, np.ndarray]:
        name = self.string()
        rank = self.u32()
        shape = tuple(self.u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        payload = np.frombuffer(self.take(4 * count), dtype="<f4")
        return name, payload.reshape(shape).astype(np.float64)

    def done(self):
        if self.pos != len(self.data):
            raise CheckpointError(
                f"{len(self.data) - self.pos} trailing bytes after checkpoint payload")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    w = _Writer()
    w.raw(MAGIC)
    w.u32(ckpt.version)
    w.string(ckpt.config_text)
    w.string(json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")))
    w.u64(len(ckpt.tensors))
    for name, arr in ckpt.tensors.items():
        w.tensor(name, arr)
    w.u64(len(ckpt.overlays))
    for name, rec in ckpt.overlays.items():
        w.string(name)
        w.u32(rec.rows)
        w.u32(rec.cols)
        w.u64(len(rec.values))
        triples = np.empty(len(rec.values), dtype=_TRIPLE)
        triples["row"] = rec.coo_rows
        triples["col"] = rec.coo_cols
        triples["value"] = rec.values
        w.raw(triples.tobytes())
    w.u64(len(ckpt.opt_slots))
    for name, arr in ckpt.opt_slots.items():
        w.tensor(name, arr)
    return w.getvalue()


def parse_checkpoint(data: bytes) -> Checkpoint:
    if data[:4] != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    r = _Reader(data)
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config_text = r.string()
    meta = json.loads(r.string())
    tensors = {}
    for _ in range(r.u64()):
        name, arr = r.tensor()
        tensors[name] = arr
    overlays = {}
    for _ in range(r.u64()):
        name = r.string()
        rows = r.u32()
        cols = r.u32()
        nnz = r.u64()
        triples = np.frombuffer(r.take(_TRIPLE.itemsize * nnz), dtype=_TRIPLE)
        overlays[name] = OverlayRecord(
            rows=rows, cols=cols,
            coo_rows=triples["row"].astype(np.uint32),
            coo_cols=triples["col"].astype(np.uint32),
            values=triples["value"].astype(np.float64))
    opt_slots = {}
    for _ in range(r.u64()):
        name, arr = r.tensor()
        opt_slots[name] = arr
    r.done()
    return Checkpoint(config_text=config_text, meta=meta, tensors=tensors,
                      overlays=overlays, opt_slots=opt_slots, version=version)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    data = checkpoint_bytes(ckpt)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise OSError(f"failed writing checkpoint to {path}: {exc}") from exc


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise OSError(f"failed reading checkpoint from {path}: {exc}") from exc
    return parse_checkpoint(data)
