"""Named parameter tensors, element-wise arithmetic, and the TMRG binary format.

A :class:`Checkpoint` is an ordered map of named float64 tensors.  The same
container doubles as an element-wise map (delta, gradient magnitude,
sensitivity, or {0,1} mask) because those objects share the checkpoint's
name/shape structure.
"""

from __future__ import annotations

import math
import struct
from typing import Iterable, Iterator

import numpy as np

from .errors import (
    BadMagic,
    DuplicateName,
    IncompatibleShapes,
    NonFiniteScalar,
    NonFiniteValues,
    TruncatedFile,
    UnsupportedVersion,
)

_MAGIC = b"TMRG"
_VERSION = 1


class Checkpoint:
    """Ordered, immutable-by-convention map of named float64 tensors."""

    __slots__ = ("_tensors",)

    def __init__(self, tensors: Iterable[tuple[str, np.ndarray]], validate: bool = True):
        ordered: dict[str, np.ndarray] = {}
        for name, arr in tensors:
            if not name:
                raise DuplicateName("tensor name must be non-empty")
            if name in ordered:
                raise DuplicateName(name)
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            if validate and not np.all(np.isfinite(arr)):
                raise NonFiniteValues(name)
            arr.flags.writeable = False
            ordered[name] = arr
        self._tensors = ordered

    @property
    def tensors(self) -> dict[str, np.ndarray]:
        return self._tensors

    @property
    def names(self) -> list[str]:
        return list(self._tensors)

    @property
    def total_dims(self) -> int:
        return sum(a.size for a in self._tensors.values())

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self._tensors.items())

    def __len__(self) -> int:
        return len(self._tensors)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if self.names != other.names:
            return False
        return all(
            a.shape == other._tensors[n].shape
            and np.array_equal(a, other._tensors[n])
            for n, a in self._tensors.items()
        )

    def __repr__(self) -> str:
        return f"Checkpoint({len(self)} tensors, N={self.total_dims})"

    def compatible(self, other: "Checkpoint") -> bool:
        return self.names == other.names and all(
            self._tensors[n].shape == other._tensors[n].shape for n in self._tensors
        )

    def flat(self) -> np.ndarray:
        """Concatenation of all tensors in checkpoint order (copy)."""
        if not self._tensors:
            return np.empty(0, dtype=np.float64)
        return np.concatenate([a.ravel() for a in self._tensors.values()])

    @classmethod
    def from_flat(cls, reference: "Checkpoint", flat: np.ndarray) -> "Checkpoint":
        """Rebuild a checkpoint shaped like ``reference`` from a flat vector."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != reference.total_dims:
            raise IncompatibleShapes(
                f"flat vector has {flat.size} entries, expected {reference.total_dims}"
            )
        out, pos = [], 0
        for name, arr in reference:
            out.append((name, flat[pos : pos + arr.size].reshape(arr.shape)))
            pos += arr.size
        return cls(out)

    def map(self, fn) -> "Checkpoint":
        return Checkpoint((n, fn(a)) for n, a in self)

    def is_mask(self) -> bool:
        return all(np.all((a == 0.0) | (a == 1.0)) for _, a in self)

    def is_nonnegative(self) -> bool:
        return all(np.all(a >= 0.0) for _, a in self)


# ElementwiseMap shares the Checkpoint structure; the alias keeps signatures
# readable where the argument is a per-dimension quantity, not weights.
ElementwiseMap = Checkpoint


def _check_compat(a: Checkpoint, b: Checkpoint) -> None:
    if not a.compatible(b):
        raise IncompatibleShapes(
            f"name/shape sequences differ: {a.names} vs {b.names}"
        )


def ew_combine(a: Checkpoint, b: Checkpoint, op: str) -> Checkpoint:
    """Element-wise add / sub / hadamard over two compatible checkpoints."""
    _check_compat(a, b)
    if op == "add":
        fn = np.add
    elif op == "sub":
        fn = np.subtract
    elif op == "hadamard":
        fn = np.multiply
    else:
        raise ValueError(f"unknown op {op!r}")
    return Checkpoint((n, fn(x, b[n])) for n, x in a)


def ew_scale(a: Checkpoint, c: float) -> Checkpoint:
    if not math.isfinite(c):
        raise NonFiniteScalar(repr(c))
    return a.map(lambda x: c * x)


def ew_abs(a: Checkpoint) -> Checkpoint:
    return a.map(np.abs)


def ew_dot(a: Checkpoint, b: Checkpoint) -> float:
    """Inner product accumulated in fixed tensor / flat-index order."""
    _check_compat(a, b)
    total = 0.0
    for n, x in a:
        total += float(np.dot(x.ravel(), b[n].ravel()))
    return total


def zeros_like(ref: Checkpoint) -> Checkpoint:
    return ref.map(np.zeros_like)


def ones_like(ref: Checkpoint) -> Checkpoint:
    return ref.map(np.ones_like)


def sum_in_order(maps: Iterable[Checkpoint]) -> Checkpoint:
    """Sum checkpoint-shaped maps in the given order (ascending task index)."""
    maps = list(maps)
    if not maps:
        raise ValueError("nothing to sum")
    acc = maps[0]
    for m in maps[1:]:
        acc = ew_combine(acc, m, "add")
    return acc


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write ``ckpt`` in the TMRG binary format (little-endian, bit-exact)."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(ckpt)))
        for name, arr in ckpt:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype("<f8", copy=False).tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFile(f"wanted {n} bytes, got {len(buf)}")
    return buf


def load_checkpoint(path) -> Checkpoint:
    """Read a TMRG file back into a checkpoint, preserving tensor order."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise BadMagic(str(path))
        version, count = struct.unpack("<II", _read_exact(fh, 8))
        if version != _VERSION:
            raise UnsupportedVersion(str(version))
        tensors: list[tuple[str, np.ndarray]] = []
        seen: set[str] = set()
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            if name in seen:
                raise DuplicateName(name)
            seen.add(name)
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(ndim)
            )
            numel = int(np.prod(shape, dtype=np.int64)) if shape else 1
            data = np.frombuffer(_read_exact(fh, 8 * numel), dtype="<f8")
            tensors.append((name, data.reshape(shape).copy()))
    return Checkpoint(tensors, validate=False)
