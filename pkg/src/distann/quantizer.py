"""Product quantization (optionally rotated) and symmetric code-vs-code distances.

Codes are one byte per subspace (256 centroids). The symmetric distance table
``table[m, i, j]`` holds the squared L2 between centroids ``i`` and ``j`` of
subspace ``m``; two codes are compared by summing one lookup per subspace,
which lets a shard score neighbor codes against an encoded query without
seeing the query's full vector.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from distann import kernels
from distann.errors import BadMagicError, DimensionMismatchError, TruncatedError
from distann.kmeans import kmeans
from distann.vectors import VectorDataset

K = 256
PQ_MAGIC = b"DANNPQ01"
CODES_MAGIC = b"DANNCOD1"
_PQ_HEADER = struct.Struct("<8sIIIB")
_CODES_HEADER = struct.Struct("<8sQI")


@dataclass(frozen=True, eq=False)
class Codebook:
    centroids: np.ndarray              # (M, K, subdim) float32
    rotation: np.ndarray | None = None  # (dim, dim); rotated = rotation @ v

    @property
    def M(self) -> int:
        return self.centroids.shape[0]

    @property
    def K(self) -> int:
        return self.centroids.shape[1]

    @property
    def subdim(self) -> int:
        return self.centroids.shape[2]

    @property
    def dim(self) -> int:
        return self.M * self.subdim

    def rotate(self, x: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=np.float32)
        if self.rotation is None:
            return x
        return np.ascontiguousarray(x @ self.rotation.T, dtype=np.float32)

    def reconstruct(self, codes: np.ndarray) -> np.ndarray:
        """Decode codes back to vectors in the rotated space."""
        codes = np.atleast_2d(codes)
        parts = [self.centroids[m][codes[:, m]] for m in range(self.M)]
        return np.concatenate(parts, axis=1)

    def unrotate(self, x: np.ndarray) -> np.ndarray:
        if self.rotation is None:
            return x
        return np.ascontiguousarray(x @ self.rotation, dtype=np.float32)


def _subspaces(x: np.ndarray, M: int):
    sub = x.shape[1] // M
    for m in range(M):
        yield m, np.ascontiguousarray(x[:, m * sub:(m + 1) * sub])


def _train_pq(x: np.ndarray, M: int, iters: int, seed: int) -> tuple[np.ndarray, float]:
    sub = x.shape[1] // M
    cents = np.empty((M, K, sub), dtype=np.float32)
    total = 0.0
    for m, part in _subspaces(x, M):
        res = kmeans(part, K, iters=iters, seed=seed + m)
        cents[m] = res.centroids
        total += res.mse
    return cents, total


def train_codebooks(sample: VectorDataset, M: int, iters: int = 15, seed: int = 0,
                    opq_iters: int = 0) -> Codebook:
    """Train per-subspace k-means codebooks (K=256).

    With ``opq_iters > 0`` an orthogonal rotation is learned by alternating
    PQ training with an orthogonal Procrustes fit of the rotation to the
    current reconstructions.
    """
    if sample.count < K:
        raise ValueError(f"need at least {K} training vectors, got {sample.count}")
    if M < 1 or sample.dim % M:
        raise DimensionMismatchError(f"dim {sample.dim} not divisible by M={M}")
    x = sample.data
    if opq_iters <= 0:
        cents, _ = _train_pq(x, M, iters, seed)
        return Codebook(cents)
    rot = np.eye(sample.dim, dtype=np.float32)
    for _ in range(opq_iters):
        cb = Codebook(_train_pq(x @ rot.T, M, iters, seed)[0], rot)
        y = cb.reconstruct(encode_batch(x, cb))
        u, _, vt = np.linalg.svd(x.astype(np.float64).T @ y.astype(np.float64))
        rot = (u @ vt).T.astype(np.float32)
    cents, _ = _train_pq(np.ascontiguousarray(x @ rot.T), M, iters, seed)
    return Codebook(cents, rot)


def encode_batch(x, cb: Codebook) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float32))
    if x.shape[1] != cb.dim:
        raise DimensionMismatchError(f"{x.shape[1]} != {cb.dim}")
    xr = cb.rotate(x)
    codes = np.empty((x.shape[0], cb.M), dtype=np.uint8)
    for m, part in _subspaces(xr, cb.M):
        labels, _ = kernels.assign_nearest(part, cb.centroids[m])
        codes[:, m] = labels
    return codes


def encode(v, cb: Codebook) -> np.ndarray:
    return encode_batch(np.asarray(v, dtype=np.float32).reshape(1, -1), cb)[0]


def quantization_mse(x, cb: Codebook) -> float:
    """Mean squared reconstruction error per vector, in the rotated space."""
    xr = cb.rotate(np.atleast_2d(x))
    diff = xr.astype(np.float64) - cb.reconstruct(encode_batch(x, cb)).astype(np.float64)
    return float(np.einsum("ij,ij->i", diff, diff).mean())


def build_sdc_table(cb: Codebook) -> np.ndarray:
    """(M, K, K) float32 table of centroid-pair squared distances."""
    table = np.empty((cb.M, cb.K, cb.K), dtype=np.float32)
    for m in range(cb.M):
        cm = np.ascontiguousarray(cb.centroids[m])
        for i in range(cb.K):
            table[m, i] = kernels.l2_to_rows(cm, cm[i])
    return table


def sdc_distance(a, b, table: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    if a.shape != b.shape or a.shape[0] != table.shape[0]:
        raise DimensionMismatchError("code lengths differ from each other or from the table")
    return float(kernels.sdc_rows(b[None, :], a, table)[0])


def sdc_to_codes(q_code, codes: np.ndarray, table: np.ndarray) -> np.ndarray:
    codes = np.ascontiguousarray(codes, dtype=np.uint8)
    return kernels.sdc_rows(codes, np.asarray(q_code, dtype=np.uint8), table)


def write_codebook(path, cb: Codebook) -> None:
    with open(path, "wb") as fh:
        fh.write(_PQ_HEADER.pack(PQ_MAGIC, cb.dim, cb.M, cb.K, int(cb.rotation is not None)))
        if cb.rotation is not None:
            fh.write(cb.rotation.astype("<f4").tobytes())
        fh.write(cb.centroids.astype("<f4").tobytes())


def read_codebook(path) -> Codebook:
    buf = Path(path).read_bytes()
    if len(buf) < _PQ_HEADER.size:
        raise TruncatedError("codebook shorter than its header")
    magic, dim, M, k, has_rot = _PQ_HEADER.unpack_from(buf)
    if magic != PQ_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if M == 0 or dim % M:
        raise DimensionMismatchError(f"dim {dim} not divisible by M={M}")
    off = _PQ_HEADER.size
    need = off + (dim * dim * 4 if has_rot else 0) + dim * k * 4
    if len(buf) < need:
        raise TruncatedError(f"expected {need} bytes, found {len(buf)}")
    rot = None
    if has_rot:
        rot = np.frombuffer(buf, "<f4", dim * dim, off).reshape(dim, dim).copy()
        off += dim * dim * 4
    cents = np.frombuffer(buf, "<f4", dim * k, off).reshape(M, k, dim // M).copy()
    return Codebook(cents, rot)


def write_codes(path, ids: np.ndarray, codes: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(_CODES_HEADER.pack(CODES_MAGIC, codes.shape[0], codes.shape[1]))
        fh.write(np.asarray(ids, dtype="<u8").tobytes())
        fh.write(np.ascontiguousarray(codes, dtype=np.uint8).tobytes())


def read_codes(path) -> tuple[np.ndarray, np.ndarray]:
    buf = Path(path).read_bytes()
    if len(buf) < _CODES_HEADER.size:
        raise TruncatedError("codes file shorter than its header")
    magic, n, M = _CODES_HEADER.unpack_from(buf)
    if magic != CODES_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    off = _CODES_HEADER.size
    if len(buf) < off + n * 8 + n * M:
        raise TruncatedError("codes file truncated")
    ids = np.frombuffer(buf, "<u8", n, off).copy()
    codes = np.frombuffer(buf, np.uint8, n * M, off + n * 8).reshape(n, M).copy()
    return ids, codes
