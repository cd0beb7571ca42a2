"""Vector datasets, squared-L2 distance, brute-force top-k and the vector file."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from distann import kernels
from distann.errors import (
    BadMagicError,
    DimensionMismatchError,
    EmptyDatasetError,
    InvalidDimensionError,
    TruncatedError,
)

VEC_MAGIC = b"DANNVEC1"
DTYPE_F32 = 0
# magic, dim u32, count u64, dtype u8, 7 reserved bytes
_VEC_HEADER = struct.Struct("<8sIQB7x")


class ScoredId(NamedTuple):
    id: int
    dist: float


@dataclass(frozen=True, eq=False, init=False)
class VectorDataset:
    """Row-major float32 vectors with unique uint64 ids (default ``0..count-1``)."""

    data: np.ndarray
    ids: np.ndarray

    def __init__(self, data, ids=None):
        data = np.ascontiguousarray(data, dtype=np.float32)
        if data.ndim != 2:
            raise InvalidDimensionError(f"expected a 2-d array, got shape {data.shape}")
        if data.shape[1] == 0:
            raise InvalidDimensionError("dim must be positive")
        if ids is None:
            ids = np.arange(data.shape[0], dtype=np.uint64)
        ids = np.ascontiguousarray(ids, dtype=np.uint64)
        if ids.shape != (data.shape[0],):
            raise ValueError("ids length must equal the vector count")
        if np.unique(ids).size != ids.size:
            raise ValueError("ids must be unique")
        data.setflags(write=False)
        ids.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "ids", ids)

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def count(self) -> int:
        return self.data.shape[0]

    def __len__(self) -> int:
        return self.count

    def subset(self, rows) -> VectorDataset:
        rows = np.asarray(rows, dtype=np.int64)
        return VectorDataset(self.data[rows], self.ids[rows])

    def row_of(self) -> dict[int, int]:
        """Map id -> row index."""
        return {int(i): r for r, i in enumerate(self.ids.tolist())}


def _as_vec(v) -> np.ndarray:
    return np.ascontiguousarray(v, dtype=np.float32).reshape(-1)


def l2_sq(a, b) -> float:
    a, b = _as_vec(a), _as_vec(b)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"{a.shape[0]} != {b.shape[0]}")
    return float(kernels.l2_to_rows(a[None, :], b)[0])


def l2_sq_rows(data: np.ndarray, q) -> np.ndarray:
    """Squared L2 from ``q`` to every row of ``data`` (float32)."""
    q = _as_vec(q)
    if data.shape[1] != q.shape[0]:
        raise DimensionMismatchError(f"{data.shape[1]} != {q.shape[0]}")
    return kernels.l2_to_rows(np.ascontiguousarray(data, dtype=np.float32), q)


def sort_scored(ids: np.ndarray, dists: np.ndarray) -> np.ndarray:
    """Permutation ordering by distance, ties by ascending id."""
    return np.lexsort((ids, dists))


def brute_force_topk(ds: VectorDataset, q, k: int) -> list[ScoredId]:
    if ds.count == 0:
        raise EmptyDatasetError("brute force over an empty dataset")
    if k < 1:
        raise ValueError("k must be >= 1")
    d = l2_sq_rows(ds.data, q)
    order = sort_scored(ds.ids, d)[:k]
    return [ScoredId(int(ds.ids[i]), float(d[i])) for i in order]


def write_vectors(path, ds: VectorDataset) -> None:
    with open(path, "wb") as fh:
        fh.write(_VEC_HEADER.pack(VEC_MAGIC, ds.dim, ds.count, DTYPE_F32))
        fh.write(ds.ids.astype("<u8").tobytes())
        fh.write(ds.data.astype("<f4").tobytes())


def decode_vectors(buf: bytes) -> VectorDataset:
    if len(buf) < _VEC_HEADER.size:
        raise TruncatedError("vector file shorter than its header")
    magic, dim, count, dtype = _VEC_HEADER.unpack_from(buf)
    if magic != VEC_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if dim == 0:
        raise InvalidDimensionError("dim must be positive")
    if dtype != DTYPE_F32:
        raise InvalidDimensionError(f"unsupported dtype code {dtype}")
    off = _VEC_HEADER.size
    need = off + count * 8 + count * dim * 4
    if len(buf) < need:
        raise TruncatedError(f"expected {need} bytes, found {len(buf)}")
    ids = np.frombuffer(buf, dtype="<u8", count=count, offset=off)
    data = np.frombuffer(buf, dtype="<f4", count=count * dim, offset=off + count * 8)
    return VectorDataset(data.reshape(count, dim).copy(), ids.copy())


def read_vectors(path) -> VectorDataset:
    return decode_vectors(Path(path).read_bytes())
