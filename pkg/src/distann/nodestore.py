"""Sharded node store and the near-data node scoring service.

Each stored node carries its full-precision vector plus, for every neighbor,
the neighbor's id and PQ code. A scoring request reads a batch of nodes,
returns exact distances for the nodes themselves and SDC-scored neighbor
candidates under a threshold, so only ids and scores cross the wire.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from distann.errors import BadMagicError, DimensionMismatchError, TruncatedError, WrongShardError
from distann.quantizer import Codebook, encode_batch
from distann.vamana import Graph
from distann.vectors import ScoredId, VectorDataset, l2_sq_rows
from distann import kernels

NODE_MAGIC = b"DANNNOD1"
_SHARD_HEADER = struct.Struct("<8sIIIIIQ")
_U64 = 0xFFFFFFFFFFFFFFFF


@dataclass(eq=False)
class PackedNode:
    id: int
    vector: np.ndarray          # (dim,) float32
    neighbor_ids: np.ndarray    # (n,) uint64
    neighbor_codes: np.ndarray  # (n, M) uint8

    @property
    def neighbor_count(self) -> int:
        return self.neighbor_ids.shape[0]

    def __eq__(self, other) -> bool:
        return (isinstance(other, PackedNode) and self.id == other.id
                and np.array_equal(self.vector, other.vector)
                and np.array_equal(self.neighbor_ids, other.neighbor_ids)
                and np.array_equal(self.neighbor_codes, other.neighbor_codes))


def packed_size(dim: int, M: int, n_neighbors: int) -> int:
    return 8 + 4 * dim + 2 + n_neighbors * (8 + M)


def _nbr_dtype(M: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("code", "u1", (M,))])


def pack_node(id: int, vector, neighbor_ids, neighbor_codes) -> bytes:
    """``id u64 | vector f32*dim | count u16 | (id u64, code M bytes) * count``."""
    vector = np.asarray(vector, dtype="<f4").reshape(-1)
    neighbor_ids = np.asarray(neighbor_ids, dtype="<u8").reshape(-1)
    codes = np.asarray(neighbor_codes, dtype=np.uint8)
    n = neighbor_ids.shape[0]
    if n > 0xFFFF:
        raise ValueError(f"{n} neighbors exceed the u16 count field")
    if codes.ndim != 2 or codes.shape[0] != n:
        raise DimensionMismatchError("need one code per neighbor")
    M = codes.shape[1]
    entries = np.empty(n, dtype=_nbr_dtype(M))
    entries["id"] = neighbor_ids
    entries["code"] = codes
    return struct.pack("<Q", id) + vector.tobytes() + struct.pack("<H", n) + entries.tobytes()


def unpack_node(buf: bytes, dim: int, M: int) -> PackedNode:
    head = 8 + 4 * dim + 2
    if len(buf) < head:
        raise TruncatedError(f"node record of {len(buf)} bytes is shorter than its {head}-byte head")
    (nid,) = struct.unpack_from("<Q", buf, 0)
    vec = np.frombuffer(buf, "<f4", dim, 8).astype(np.float32)
    (n,) = struct.unpack_from("<H", buf, 8 + 4 * dim)
    if len(buf) != packed_size(dim, M, n):
        raise TruncatedError(f"record holds {len(buf)} bytes, expected {packed_size(dim, M, n)}")
    entries = np.frombuffer(buf, _nbr_dtype(M), n, head)
    return PackedNode(nid, vec, entries["id"].astype(np.uint64), entries["code"].copy())


def _mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; uint64 arithmetic wraps modulo 2**64
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def shard_of_many(ids, num_shards: int) -> np.ndarray:
    if num_shards < 1:
        raise ValueError("num_shards must be >= 1")
    ids = np.asarray(ids, dtype=np.uint64)
    return (_mix64(ids) % np.uint64(num_shards)).astype(np.int64)


def shard_of(id: int, num_shards: int) -> int:
    """splitmix64(id) mod num_shards."""
    return int(shard_of_many(np.array([id & _U64], dtype=np.uint64), num_shards)[0])


@dataclass
class ScoreResult:
    r_ids: np.ndarray
    r_dists: np.ndarray
    c_ids: np.ndarray
    c_dists: np.ndarray
    missing: list[int]

    @property
    def R(self) -> list[ScoredId]:
        return [ScoredId(int(i), float(d)) for i, d in zip(self.r_ids, self.r_dists)]

    @property
    def C(self) -> list[ScoredId]:
        return [ScoredId(int(i), float(d)) for i, d in zip(self.c_ids, self.c_dists)]

    @property
    def found(self) -> int:
        return self.r_ids.shape[0]


def _sorted_unique(ids: np.ndarray, dists: np.ndarray, limit: int | None):
    order = np.lexsort((ids, dists))
    ids, dists = ids[order], dists[order]
    if ids.size > 1:
        keep = np.ones(ids.size, dtype=bool)
        keep[1:] = ids[1:] != ids[:-1]
        ids, dists = ids[keep], dists[keep]
    if limit is not None:
        ids, dists = ids[:limit], dists[:limit]
    return ids, dists


class Shard:
    """One node-store shard: packed records plus a columnar view used for scoring."""

    def __init__(self, shard_id: int, num_shards: int, ids, vectors, nbr_ids, nbr_codes,
                 nbr_count, sdc_table: np.ndarray, records: list[bytes] | None = None):
        self.shard_id = shard_id
        self.num_shards = num_shards
        self.ids = np.asarray(ids, dtype=np.uint64)
        self.vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        self.nbr_ids = np.asarray(nbr_ids, dtype=np.uint64)
        self.nbr_codes = np.ascontiguousarray(nbr_codes, dtype=np.uint8)
        self.nbr_count = np.asarray(nbr_count, dtype=np.int64)
        self.sdc_table = sdc_table
        if np.any(shard_of_many(self.ids, num_shards) != shard_id):
            raise WrongShardError(f"shard {shard_id} given nodes it does not own")
        self._row = {int(i): r for r, i in enumerate(self.ids.tolist())}
        self._records = records
        self._lock = threading.Lock()
        self.io_counter = 0

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def M(self) -> int:
        return self.nbr_codes.shape[2]

    @property
    def R_serve(self) -> int:
        return self.nbr_codes.shape[1]

    @property
    def count(self) -> int:
        return self.ids.shape[0]

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()

    def __contains__(self, key: int) -> bool:
        return int(key) in self._row

    @classmethod
    def from_records(cls, shard_id, num_shards, dim, M, R_serve, records, sdc_table) -> Shard:
        n = len(records)
        ids = np.empty(n, dtype=np.uint64)
        vecs = np.empty((n, dim), dtype=np.float32)
        nbr_ids = np.zeros((n, R_serve), dtype=np.uint64)
        codes = np.zeros((n, R_serve, M), dtype=np.uint8)
        cnt = np.zeros(n, dtype=np.int64)
        for r, rec in enumerate(records):
            node = unpack_node(rec, dim, M)
            if node.neighbor_count > R_serve:
                raise ValueError(f"node {node.id} has {node.neighbor_count} > R_serve neighbors")
            ids[r] = node.id
            vecs[r] = node.vector
            cnt[r] = node.neighbor_count
            nbr_ids[r, :cnt[r]] = node.neighbor_ids
            codes[r, :cnt[r]] = node.neighbor_codes
        return cls(shard_id, num_shards, ids, vecs, nbr_ids, codes, cnt, sdc_table, list(records))

    def records(self) -> list[bytes]:
        if self._records is None:
            self._records = [
                pack_node(int(self.ids[r]), self.vectors[r], self.nbr_ids[r, :self.nbr_count[r]],
                          self.nbr_codes[r, :self.nbr_count[r]])
                for r in range(self.count)
            ]
        return self._records

    def get(self, key: int) -> PackedNode | None:
        r = self._row.get(int(key))
        if r is None:
            return None
        c = self.nbr_count[r]
        return PackedNode(int(self.ids[r]), self.vectors[r].copy(), self.nbr_ids[r, :c].copy(),
                          self.nbr_codes[r, :c].copy())

    def packed_bytes(self) -> int:
        return int(sum(packed_size(self.dim, self.M, int(c)) for c in self.nbr_count))

    def score(self, keys, t: float, l: int, q, q_sdc) -> ScoreResult:
        return score_nodes(self, keys, t, l, q, q_sdc)


def score_nodes(shard: Shard, keys, t: float, l: int, q, q_sdc) -> ScoreResult:
    """Batch-read ``keys``; exact-score the nodes, SDC-score their neighbors.

    R: every found node with its exact distance to ``q``, ascending.
    C: distinct neighbor candidates with SDC distance strictly below ``t``,
    ascending, at most ``l``. Unknown keys are reported in ``missing``.
    """
    if l < 1:
        raise ValueError("candidate limit l must be >= 1")
    keys = np.unique(np.asarray(keys, dtype=np.uint64))
    if keys.size and np.any(shard_of_many(keys, shard.num_shards) != shard.shard_id):
        raise WrongShardError(f"request for shard {shard.shard_id} holds foreign keys")
    rows, missing = [], []
    for k in keys.tolist():
        r = shard._row.get(k)
        if r is None:
            missing.append(k)
        else:
            rows.append(r)
    with shard._lock:
        shard.io_counter += len(rows)
    empty_i = np.empty(0, dtype=np.uint64)
    empty_d = np.empty(0, dtype=np.float32)
    if not rows:
        return ScoreResult(empty_i, empty_d, empty_i, empty_d, missing)
    rows = np.array(rows, dtype=np.int64)
    q = np.ascontiguousarray(q, dtype=np.float32).reshape(-1)
    if q.shape[0] != shard.dim:
        raise DimensionMismatchError(f"query dim {q.shape[0]} != {shard.dim}")
    r_ids, r_d = _sorted_unique(shard.ids[rows], l2_sq_rows(shard.vectors[rows], q), None)
    mask = np.arange(shard.R_serve)[None, :] < shard.nbr_count[rows][:, None]
    cand_ids = shard.nbr_ids[rows][mask]
    cand_codes = np.ascontiguousarray(shard.nbr_codes[rows][mask])
    c_ids, c_d = empty_i, empty_d
    if cand_ids.size:
        d = kernels.sdc_rows(cand_codes, np.asarray(q_sdc, dtype=np.uint8), shard.sdc_table)
        below = d < np.float32(t) if np.isfinite(t) else np.ones(d.shape, dtype=bool)
        c_ids, c_d = _sorted_unique(cand_ids[below], d[below], l)
    return ScoreResult(r_ids, r_d, c_ids, c_d, missing)


class ShardSet:
    def __init__(self, shards: list[Shard], sdc_table: np.ndarray):
        self.shards = shards
        self.sdc_table = sdc_table

    @property
    def num_shards(self) -> int:
        return len(self.shards)

    def route(self, keys) -> dict[int, np.ndarray]:
        keys = np.asarray(keys, dtype=np.uint64)
        owner = shard_of_many(keys, self.num_shards)
        return {int(s): keys[owner == s] for s in np.unique(owner)}

    def total_nodes(self) -> int:
        return sum(s.count for s in self.shards)

    def total_packed_bytes(self) -> int:
        return sum(s.packed_bytes() for s in self.shards)

    def io_total(self) -> int:
        return sum(s.io_counter for s in self.shards)


def load_shards(graph: Graph, ds: VectorDataset, codebook: Codebook, num_shards: int,
                sdc_table: np.ndarray, codes: np.ndarray | None = None) -> ShardSet:
    """Distribute every graph node to ``shard_of(id)``, duplicating neighbor codes into it."""
    if codes is None:
        codes = encode_batch(ds.data, codebook)
    if codes.shape[0] != ds.count:
        raise ValueError("need one code per corpus vector")
    owner = shard_of_many(ds.ids, num_shards)
    R = graph.R
    shards = []
    for s in range(num_shards):
        rows = np.flatnonzero(owner == s)
        adj = graph.adj[rows]
        valid = adj >= 0
        safe = np.where(valid, adj, 0)
        nbr_ids = np.where(valid, ds.ids[safe], np.uint64(0))
        nbr_codes = codes[safe] * valid[:, :, None].astype(np.uint8)
        shards.append(Shard(s, num_shards, ds.ids[rows], ds.data[rows], nbr_ids,
                            nbr_codes, graph.deg[rows], sdc_table))
    assert sum(sh.count for sh in shards) == ds.count
    assert R == graph.adj.shape[1]
    return ShardSet(shards, sdc_table)


def write_shard(path, shard: Shard) -> None:
    with open(path, "wb") as fh:
        fh.write(_SHARD_HEADER.pack(NODE_MAGIC, shard.shard_id, shard.num_shards, shard.dim,
                                    shard.M, shard.R_serve, shard.count))
        for rec in shard.records():
            fh.write(struct.pack("<I", len(rec)))
            fh.write(rec)


def read_shard(path, sdc_table: np.ndarray) -> Shard:
    buf = Path(path).read_bytes()
    if len(buf) < _SHARD_HEADER.size:
        raise TruncatedError("shard file shorter than its header")
    magic, sid, nshards, dim, M, R_serve, count = _SHARD_HEADER.unpack_from(buf)
    if magic != NODE_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if sdc_table.shape[0] != M:
        raise DimensionMismatchError(f"shard uses M={M}, table has {sdc_table.shape[0]}")
    off = _SHARD_HEADER.size
    records = []
    for _ in range(count):
        if off + 4 > len(buf):
            raise TruncatedError("shard file truncated inside a record length")
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        if off + n > len(buf):
            raise TruncatedError("shard file truncated inside a record")
        records.append(buf[off:off + n])
        off += n
    return Shard.from_records(sid, nshards, dim, M, R_serve, records, sdc_table)
