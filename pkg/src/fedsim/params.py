"""Flat parameter vectors with named blocks, and the algebra on them.

Every algorithm in the simulator manipulates whole update vectors; layers
only exist as named contiguous blocks so that partial-sharing schemes can
address them. All values are float64 and reductions over clients always run
in ascending client_id order, which makes results independent of how client
work was scheduled.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionMismatchError, UnknownBlockError, ZeroNormError

Block = tuple[str, int, int]  # (name, start, length)


def _as_readonly(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ParamVector:
    """Immutable flat float64 vector plus an ordered map of named blocks.

    Blocks must be contiguous, non-overlapping and cover exactly [0, p).
    """

    values: np.ndarray
    blocks: tuple[Block, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", _as_readonly(self.values))
        blocks = tuple((str(n), int(s), int(l)) for n, s, l in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        pos = 0
        for name, start, length in blocks:
            if start != pos or length <= 0:
                raise ValueError(
                    f"block {name!r} at ({start},{length}) breaks contiguous "
                    f"coverage (expected start {pos})")
            pos += length
        if pos != self.values.shape[0]:
            raise ValueError(
                f"blocks cover {pos} entries but vector has {self.values.shape[0]}")
        if len({b[0] for b in blocks}) != len(blocks):
            raise ValueError("duplicate block names")
        if not np.all(np.isfinite(self.values)):
            bad = int(np.flatnonzero(~np.isfinite(self.values))[0])
            raise ValueError(f"non-finite parameter value at index {bad}")

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @property
    def block_names(self) -> tuple[str, ...]:
        return tuple(b[0] for b in self.blocks)

    def block_slice(self, name: str) -> slice:
        for bname, start, length in self.blocks:
            if bname == name:
                return slice(start, start + length)
        raise UnknownBlockError(f"unknown block {name!r}; have {self.block_names}")

    def block_values(self, name: str) -> np.ndarray:
        return self.values[self.block_slice(name)]

    def with_values(self, values) -> "ParamVector":
        return ParamVector(values, self.blocks)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros(self.dim), self.blocks)

    def same_structure(self, other: "ParamVector") -> bool:
        return self.blocks == other.blocks and self.dim == other.dim

    def __add__(self, other: "ParamVector") -> "ParamVector":
        _check_structure(self, other)
        return self.with_values(self.values + other.values)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        _check_structure(self, other)
        return self.with_values(self.values - other.values)

    def scaled(self, factor: float) -> "ParamVector":
        return self.with_values(self.values * float(factor))

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


def _check_structure(a: ParamVector, b: ParamVector, index: int | None = None):
    if a.dim != b.dim or a.blocks != b.blocks:
        raise DimensionMismatchError(
            f"incompatible parameter vectors (dims {a.dim} vs {b.dim})"
            + (f" at client position {index}" if index is not None else ""),
            index=index)


def combine(weights: Sequence[float], vectors: Sequence[ParamVector]) -> ParamVector:
    """Weighted sum of parameter vectors, accumulated in list order."""
    if len(weights) != len(vectors) or not vectors:
        raise ValueError(
            f"need equally many weights and vectors, >= 1 each "
            f"(got {len(weights)} and {len(vectors)})")
    ref = vectors[0]
    acc = np.zeros(ref.dim)
    for i, (w, v) in enumerate(zip(weights, vectors)):
        _check_structure(ref, v, index=i)
        acc += float(w) * v.values
    return ParamVector(acc, ref.blocks)


def cosine_similarity(u: ParamVector, v: ParamVector,
                      client_id: int | None = None) -> float:
    """<u,v> / (|u||v|); raises ZeroNormError on a zero-norm input."""
    _check_structure(u, v)
    nu, nv = np.linalg.norm(u.values), np.linalg.norm(v.values)
    if nu == 0.0 or nv == 0.0:
        raise ZeroNormError("cosine similarity undefined for zero-norm update",
                            client_id=client_id)
    return float(np.dot(u.values, v.values) / (nu * nv))


def masked_overwrite(target: ParamVector, source: ParamVector,
                     shared_blocks: Iterable[str]) -> ParamVector:
    """Copy of ``target`` with entries in ``shared_blocks`` taken from source."""
    _check_structure(target, source)
    out = target.values.copy()
    for name in shared_blocks:
        sl = target.block_slice(name)
        out[sl] = source.values[sl]
    return ParamVector(out, target.blocks)


@dataclass(frozen=True)
class ClientUpdate:
    """One client's round output as seen by the server."""

    client_id: int
    delta: ParamVector
    steps: int
    delta_control: ParamVector | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"client {self.client_id}: steps must be >= 1")


@dataclass(frozen=True)
class UpdateSet:
    """Updates of one round, sorted by client_id, with aggregation weights.

    Weights are nonnegative and sum to 1 within 1e-9; all deltas share one
    dimension and block map.
    """

    updates: tuple[ClientUpdate, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        if not self.updates or len(self.updates) != len(self.weights):
            raise ValueError("need one weight per update, >= 1 updates")
        order = sorted(range(len(self.updates)),
                       key=lambda i: self.updates[i].client_id)
        ups = tuple(self.updates[i] for i in order)
        wts = tuple(float(self.weights[i]) for i in order)
        object.__setattr__(self, "updates", ups)
        object.__setattr__(self, "weights", wts)
        ids = [u.client_id for u in ups]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate client ids in update set: {ids}")
        ref = ups[0].delta
        for i, u in enumerate(ups):
            _check_structure(ref, u.delta, index=i)
        if any(w < 0 for w in wts):
            raise ValueError("aggregation weights must be nonnegative")
        if abs(sum(wts) - 1.0) > 1e-9:
            raise ValueError(f"aggregation weights sum to {sum(wts)!r}, not 1")

    @property
    def client_ids(self) -> tuple[int, ...]:
        return tuple(u.client_id for u in self.updates)

    @property
    def deltas(self) -> tuple[ParamVector, ...]:
        return tuple(u.delta for u in self.updates)

    def __len__(self) -> int:
        return len(self.updates)


_MAGIC = b"FSPV"


def save_params(path, pv: ParamVector) -> None:
    """Write a parameter checkpoint.

    Binary layout, little-endian: magic ``FSPV``, uint64 dimension, uint32
    block count, then per block (uint32 name length, UTF-8 name, uint64
    start, uint64 length), then dimension float64 values.
    """
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", pv.dim))
        f.write(struct.pack("<I", len(pv.blocks)))
        for name, start, length in pv.blocks:
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<QQ", start, length))
        f.write(pv.values.astype("<f8").tobytes())


def load_params(path) -> ParamVector:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a fedsim parameter file")
        (dim,) = struct.unpack("<Q", f.read(8))
        (nblocks,) = struct.unpack("<I", f.read(4))
        blocks = []
        for _ in range(nblocks):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            start, length = struct.unpack("<QQ", f.read(16))
            blocks.append((name, start, length))
        values = np.frombuffer(f.read(8 * dim), dtype="<f8")
        if values.shape[0] != dim:
            raise ValueError(f"{path}: truncated parameter file")
    return ParamVector(values, tuple(blocks))
