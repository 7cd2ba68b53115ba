"""Versioned binary container for named float64 tensors.

Layout (all integers little-endian)::

    b"MDGC" | version:u32 | count:u32
    per tensor: name_len:u16 | name:utf-8 | rank:u8 | dims:u32*rank | values:f64*prod(dims)

Values are row-major. Nothing follows the last tensor.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .errors import FormatError, ValidationError

MAGIC = b"MDGC"
VERSION = 1
CONFIG_PREFIX = "config."


class Checkpoint:
    """Ordered mapping of tensor name to float64 array.

    Hyperparameters echoed into a checkpoint live under ``config.<key>`` as
    rank-0 tensors; ``learned_names`` skips them.
    """

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None):
        self._tensors: dict[str, np.ndarray] = {}
        for name, value in (tensors or {}).items():
            self[name] = value

    def __setitem__(self, name: str, value) -> None:
        arr = np.array(value, dtype=np.float64, order="C")
        if arr.ndim > 255:
            raise ValidationError(f"tensor {name!r} has rank {arr.ndim}")
        if not np.isfinite(arr).all():
            raise ValidationError(f"tensor {name!r} has non-finite entries")
        if len(name.encode("utf-8")) > 0xFFFF:
            raise ValidationError("tensor name too long")
        arr.setflags(write=False)
        self._tensors[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._tensors[name]
        except KeyError:
            raise KeyError(f"checkpoint has no tensor {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def learned_names(self) -> list[str]:
        return [n for n in self._tensors if not n.startswith(CONFIG_PREFIX)]

    def with_prefix(self, prefix: str) -> dict[str, np.ndarray]:
        return {n: t for n, t in self._tensors.items() if n.startswith(prefix)}

    def config(self) -> dict[str, float]:
        return {n[len(CONFIG_PREFIX):]: float(t) for n, t in self._tensors.items() if n.startswith(CONFIG_PREFIX)}

    def tokens(self) -> np.ndarray:
        """Domain token vectors stacked in domain-id order."""
        found = sorted((int(n.split(".", 1)[1]), t) for n, t in self._tensors.items() if n.startswith("token."))
        if not found:
            raise ValidationError("checkpoint holds no domain tokens")
        return np.stack([t for _, t in found])

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<II", VERSION, len(self._tensors))]
        for name, arr in self._tensors.items():
            raw = name.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)))
            parts.append(raw)
            parts.append(struct.pack("<B", arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(arr.astype("<f8", copy=False).tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        view = memoryview(buf)
        pos = 0

        def take(n: int) -> memoryview:
            nonlocal pos
            if pos + n > len(view):
                raise FormatError(f"checkpoint truncated at byte {pos} (needed {n} more)")
            chunk = view[pos:pos + n]
            pos += n
            return chunk

        if bytes(take(4)) != MAGIC:
            raise FormatError("not a checkpoint file (bad magic)")
        version, count = struct.unpack("<II", take(8))
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        ckpt = cls()
        for _ in range(count):
            (name_len,) = struct.unpack("<H", take(2))
            name = bytes(take(name_len)).decode("utf-8")
            (rank,) = struct.unpack("<B", take(1))
            dims = struct.unpack(f"<{rank}I", take(4 * rank))
            size = int(np.prod(dims, dtype=np.int64))
            values = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64)
            ckpt._tensors[name] = values.reshape(dims)
            ckpt._tensors[name].setflags(write=False)
        if pos != len(view):
            raise FormatError(f"{len(view) - pos} trailing bytes after the last tensor")
        return ckpt

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    ckpt.save(path)


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.load(path)
