"""Binary alignment checkpoints with strict, versioned framing.

Layout: magic bytes, format version, config fingerprint, stage tag,
step counter, component seeds, optimizer tag, then a counted block of
named row-major float64 arrays. Serialization is deterministic, so
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpointError, VersionMismatchError

MAGIC = b"XGPTCKPT"
FORMAT_VERSION = 1


@dataclass
class AlignmentCheckpoint:
    fingerprint: str
    stage: str
    step: int
    seeds: tuple[int, int, int]
    weight: np.ndarray
    bias: np.ndarray
    optimizer: str = "adam"
    opt_t: int = 0
    opt_arrays: dict[str, np.ndarray] = field(default_factory=dict)


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    head = _pack_str(name) + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError("unexpected end of checkpoint file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def i64(self) -> int:
        return struct.unpack("<q", self.take(8))[0]

    def text(self) -> str:
        n = self.u32()
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptCheckpointError(f"bad string field: {exc}") from exc

    def array(self) -> tuple[str, np.ndarray]:
        name = self.text()
        ndim = self.u32()
        if ndim > 4:
            raise CorruptCheckpointError(f"implausible array rank {ndim}")
        shape = struct.unpack(f"<{ndim}Q", self.take(8 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        raw = self.take(8 * count)
        return name, np.frombuffer(raw, dtype=np.float64).reshape(shape).copy()


def save_checkpoint(ckpt: AlignmentCheckpoint, path: str | Path) -> None:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    parts.append(_pack_str(ckpt.fingerprint))
    parts.append(_pack_str(ckpt.stage))
    parts.append(struct.pack("<Q", ckpt.step))
    parts.append(struct.pack("<3q", *ckpt.seeds))
    parts.append(_pack_str(ckpt.optimizer))
    parts.append(struct.pack("<Q", ckpt.opt_t))
    arrays = [("weight", ckpt.weight), ("bias", ckpt.bias)]
    arrays.extend(sorted(ckpt.opt_arrays.items()))
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        parts.append(_pack_array(name, arr))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> AlignmentCheckpoint:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CorruptCheckpointError("bad magic bytes")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format {version}, expected {FORMAT_VERSION}")
    fingerprint = r.text()
    stage = r.text()
    step = r.u64()
    seeds = tuple(struct.unpack("<3q", r.take(24)))
    optimizer = r.text()
    opt_t = r.u64()
    n_arrays = r.u32()
    named: dict[str, np.ndarray] = {}
    for _ in range(n_arrays):
        name, arr = r.array()
        if name in named:
            raise CorruptCheckpointError(f"duplicate array {name!r}")
        named[name] = arr
    if r.pos != len(data):
        raise CorruptCheckpointError("trailing bytes after checkpoint payload")
    if "weight" not in named or "bias" not in named:
        raise CorruptCheckpointError("missing alignment parameter arrays")
    weight = named.pop("weight")
    bias = named.pop("bias")
    return AlignmentCheckpoint(
        fingerprint=fingerprint,
        stage=stage,
        step=step,
        seeds=seeds,
        weight=weight,
        bias=bias,
        optimizer=optimizer,
        opt_t=opt_t,
        opt_arrays=named,
    )
