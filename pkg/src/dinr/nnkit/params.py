"""Flat parameter storage and its on-disk format."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .tensor import Tensor

MAGIC = b"DINRW001"


@dataclass(frozen=True)
class Slot:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class ParamSet:
    """Named parameter arrays packed into one flat ``values`` vector.

    ``self[name]`` returns a leaf Tensor whose data and grad are views into
    the flat buffers, so optimizers can operate on ``values``/``grads``
    directly.
    """

    def __init__(self, layout: Iterable[tuple[str, tuple[int, ...]]], dtype=np.float64):
        slots = []
        offset = 0
        for name, shape in layout:
            shape = tuple(int(s) for s in shape)
            slot = Slot(name, shape, offset)
            if any(s.name == name for s in slots):
                raise ValueError(f"duplicate parameter name {name!r}")
            slots.append(slot)
            offset += slot.size
        self.layout: list[Slot] = slots
        self._index = {s.name: s for s in slots}
        self.values = np.zeros(offset, dtype=dtype)
        self.grads = np.zeros(offset, dtype=dtype)
        self._leaves: dict[str, Tensor] = {}
        self._rebind()

    def _rebind(self) -> None:
        self._leaves = {}
        for s in self.layout:
            v = self.values[s.offset:s.offset + s.size].reshape(s.shape)
            g = self.grads[s.offset:s.offset + s.size].reshape(s.shape)
            self._leaves[s.name] = Tensor(v, requires_grad=True, grad=g)

    def __len__(self) -> int:
        return self.values.size

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __getitem__(self, name: str) -> Tensor:
        return self._leaves[name]

    def array(self, name: str) -> np.ndarray:
        return self._leaves[name].data

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.layout]

    def zero_grad(self) -> None:
        self.grads[...] = 0

    def copy(self) -> "ParamSet":
        out = ParamSet([(s.name, s.shape) for s in self.layout], dtype=self.dtype)
        out.values[...] = self.values
        return out

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet([(s.name, s.shape) for s in self.layout], dtype=dtype)
        out.values[...] = self.values.astype(dtype)
        return out

    def digest(self) -> str:
        """Short content hash of the current values."""
        return hashlib.sha256(np.ascontiguousarray(self.values).tobytes()).hexdigest()[:16]

    def same_layout(self, other: "ParamSet") -> bool:
        return [(s.name, s.shape) for s in self.layout] == [(s.name, s.shape) for s in other.layout]


# ---------------------------------------------------------------- serialization
#
# magic "DINRW001"
# u32 entry count
# per entry: u32 name length, name bytes (utf-8), u32 rank, rank x u32 dims, u64 offset
# u32 metadata length, metadata bytes (utf-8 JSON; may be empty)
# u32 schedule length n, n x float64 (cumulative alphas; n may be 0)
# float32 values, little-endian

def dumps(params: ParamSet, meta: dict | None = None,
          schedule: np.ndarray | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(params.layout))]
    for s in params.layout:
        name = s.name.encode("utf-8")
        parts.append(struct.pack("<I", len(name)))
        parts.append(name)
        parts.append(struct.pack("<I", len(s.shape)))
        parts.append(struct.pack(f"<{len(s.shape)}I", *s.shape))
        parts.append(struct.pack("<Q", s.offset))
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta_bytes)))
    parts.append(meta_bytes)
    sched = np.zeros(0) if schedule is None else np.asarray(schedule, dtype="<f8")
    parts.append(struct.pack("<I", sched.size))
    parts.append(sched.astype("<f8").tobytes())
    parts.append(params.values.astype("<f4").tobytes())
    return b"".join(parts)


def loads(buf: bytes, dtype=np.float64) -> tuple[ParamSet, dict, np.ndarray]:
    if buf[:8] != MAGIC:
        raise ValueError("not a DINRW001 weights file")
    pos = 8

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    (n,) = take("<I")
    layout = []
    offsets = []
    for _ in range(n):
        (ln,) = take("<I")
        name = buf[pos:pos + ln].decode("utf-8")
        pos += ln
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        (off,) = take("<Q")
        layout.append((name, tuple(dims)))
        offsets.append(off)
    (ml,) = take("<I")
    meta = json.loads(buf[pos:pos + ml].decode("utf-8")) if ml else {}
    pos += ml
    (ns,) = take("<I")
    sched = np.frombuffer(buf, dtype="<f8", count=ns, offset=pos).astype(np.float64)
    pos += 8 * ns
    params = ParamSet(layout, dtype=dtype)
    if [s.offset for s in params.layout] != offsets:
        raise ValueError("weights file layout offsets are not a contiguous partition")
    values = np.frombuffer(buf, dtype="<f4", count=len(params), offset=pos)
    if pos + 4 * len(params) != len(buf):
        raise ValueError("weights file payload size does not match layout")
    params.values[...] = values.astype(dtype)
    return params, meta, sched


def save(path, params: ParamSet, meta: dict | None = None,
         schedule: np.ndarray | None = None) -> None:
    Path(path).write_bytes(dumps(params, meta, schedule))


def load(path, dtype=np.float64) -> tuple[ParamSet, dict, np.ndarray]:
    return loads(Path(path).read_bytes(), dtype=dtype)
