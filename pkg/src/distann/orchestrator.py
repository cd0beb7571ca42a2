"""Distributed beam search over the shard set, seeded from an in-memory head index.

Per hop: take the best ``BW`` unvisited candidates, fan them out to their
owning shards in one batched scoring call per shard, then merge the exact
node scores into the result heap and the SDC-scored neighbor candidates into
the candidate heap. Layout metrics for node records and scoring responses
are also computed here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from distann.errors import EmptyDatasetError, SearchFailedError
from distann.nodestore import ShardSet, shard_of_many
from distann.quantizer import Codebook, encode, encode_batch, sdc_to_codes
from distann.transport import HopResult, LocalTransport
from distann.vamana import Graph, build_vamana, search_rows
from distann.vectors import ScoredId, VectorDataset

_EMPTY_IDS = np.empty(0, dtype=np.uint64)
_EMPTY_D = np.empty(0, dtype=np.float32)


@dataclass(frozen=True)
class SearchParams:
    BW: int = 32
    H: int = 6
    k: int = 10
    L: int = 64
    k_head: int = 32
    prune_with_results: bool = False   # also cap t by the worst full result (off by default)

    def __post_init__(self):
        if min(self.BW, self.k, self.L, self.k_head) < 1 or self.H < 0:
            raise ValueError(f"parameters must be positive: {self}")
        if self.L < max(self.BW, self.k):
            raise ValueError(f"need L >= max(BW, k), got L={self.L}, BW={self.BW}, k={self.k}")


@dataclass(frozen=True)
class LayoutParams:
    R: int
    d: int            # bytes per full vector
    d_opq: int        # bytes per code
    sizeof_id: int = 8
    sizeof_score: int = 4


def space_amplification(p: LayoutParams, baseline_sizeof_id: int) -> float:
    """Node record bytes with duplicated neighbor codes over id-list-only record bytes."""
    if p.R < 0 or p.d <= 0 or min(p.sizeof_id, baseline_sizeof_id) <= 0 or p.d_opq < 0:
        raise ValueError("layout sizes must be positive")
    return ((1 + p.R) * p.sizeof_id + p.d + p.R * p.d_opq) / (p.R * baseline_sizeof_id + p.d)


def bandwidth_saving(p: LayoutParams) -> float:
    """Scoring-response bytes over raw node bytes; below 1 means the response is smaller."""
    if p.R < 0 or p.d <= 0 or p.sizeof_id <= 0 or p.d_opq < 0 or p.sizeof_score < 0:
        raise ValueError("layout sizes must be non-negative")
    num = (1 + p.R) * (p.sizeof_id + p.sizeof_score) + p.d + p.d_opq
    return num / ((1 + p.R) * p.sizeof_id + p.d + p.R * p.d_opq)


def _merge_arrays(ids: np.ndarray, dists: np.ndarray, limit: int | None):
    """Sort by (dist, id), keep the first (smallest) entry per id, truncate."""
    if ids.size == 0:
        return _EMPTY_IDS, _EMPTY_D
    order = np.lexsort((ids, dists))
    ids, dists = ids[order], dists[order]
    _, first = np.unique(ids, return_index=True)
    if first.size != ids.size:
        first.sort()
        ids, dists = ids[first], dists[first]
    if limit is not None:
        ids, dists = ids[:limit], dists[:limit]
    return ids, dists


def merge_partial(lists, limit: int) -> list[ScoredId]:
    """Merge ascending ScoredId lists into one ascending, id-deduplicated list of <= limit."""
    ids, dists = [], []
    for seq in lists:
        prev = None
        for item in seq:
            key = (item[1], item[0])
            if prev is not None and key < prev:
                raise ValueError("merge_partial input list is not sorted ascending")
            prev = key
            ids.append(item[0])
            dists.append(item[1])
    if not ids:
        return []
    mi, md = _merge_arrays(np.array(ids, dtype=np.uint64), np.array(dists, dtype=np.float64), limit)
    return [ScoredId(int(i), float(d)) for i, d in zip(mi, md)]


@dataclass
class HeadIndex:
    """In-memory graph over the head vectors plus their precomputed codes."""

    graph: Graph
    codes: np.ndarray   # (n_head, M)

    @property
    def ids(self) -> np.ndarray:
        return self.graph.vectors.ids

    @property
    def count(self) -> int:
        return self.graph.count

    @classmethod
    def build(cls, vectors: VectorDataset, codebook: Codebook, R: int = 32,
              L_build: int | None = None, alpha: float = 1.2, seed: int = 0,
              codes: np.ndarray | None = None) -> HeadIndex:
        if vectors.count == 0:
            raise EmptyDatasetError("head index needs at least one vector")
        g = build_vamana(vectors, R=R, L_build=L_build, alpha=alpha, seed=seed)
        return cls(g, encode_batch(vectors.data, codebook) if codes is None else codes)

    def seeds(self, q, q_sdc, k_head: int, sdc_table: np.ndarray, L: int | None = None):
        """Top ``k_head`` head ids for ``q``, each scored by SDC against its code."""
        k_head = min(k_head, self.count)
        L = max(k_head, L or k_head)
        _, _, rows, _ = search_rows(self.graph, q, L, k_head)
        return self.ids[rows], sdc_to_codes(q_sdc, self.codes[rows], sdc_table)


@dataclass
class HopRecord:
    keys: int
    shards: list[int]
    failed: list[int]
    latency_ms: float
    bytes_sent: int
    bytes_recv: int


@dataclass
class QueryStats:
    io_used: int = 0
    hops_executed: int = 0
    latency_ms: float = 0.0
    bytes_sent: int = 0
    bytes_recv: int = 0
    failed_calls: int = 0
    calls: int = 0
    visited: list[int] = field(default_factory=list)
    hop_log: list[HopRecord] = field(default_factory=list)


@dataclass
class QueryState:
    """Per-query heaps kept as sorted arrays: H_R (capacity k) and H_C (capacity L)."""

    k: int
    L: int
    r_ids: np.ndarray = field(default_factory=lambda: _EMPTY_IDS)
    r_d: np.ndarray = field(default_factory=lambda: _EMPTY_D)
    c_ids: np.ndarray = field(default_factory=lambda: _EMPTY_IDS)
    c_d: np.ndarray = field(default_factory=lambda: _EMPTY_D)
    visited: set = field(default_factory=set)

    def peekworst(self) -> float:
        return float(self.c_d[-1]) if self.c_ids.size == self.L else math.inf

    def result_worst(self) -> float:
        return float(self.r_d[-1]) if self.r_ids.size == self.k else math.inf

    def pop_best(self, n: int) -> np.ndarray:
        keys = self.c_ids[:n]
        self.c_ids, self.c_d = self.c_ids[n:], self.c_d[n:]
        self.visited.update(keys.tolist())
        return keys

    def insert_candidates(self, ids: np.ndarray, dists: np.ndarray) -> None:
        if ids.size == 0:
            return
        if self.visited:
            keep = np.fromiter((i not in self.visited for i in ids.tolist()), dtype=bool, count=ids.size)
            ids, dists = ids[keep], dists[keep]
        self.c_ids, self.c_d = _merge_arrays(np.concatenate([self.c_ids, ids]),
                                             np.concatenate([self.c_d, dists]), self.L)

    def insert_results(self, ids: np.ndarray, dists: np.ndarray) -> None:
        if ids.size:
            self.r_ids, self.r_d = _merge_arrays(np.concatenate([self.r_ids, ids]),
                                                 np.concatenate([self.r_d, dists]), self.k)

    def results(self) -> list[ScoredId]:
        return [ScoredId(int(i), float(d)) for i, d in zip(self.r_ids, self.r_d)]


class Orchestrator:
    """Runs queries against a transport; holds only the head index and quantizer state."""

    def __init__(self, transport, head: HeadIndex, codebook: Codebook, sdc_table: np.ndarray):
        if head.count == 0:
            raise EmptyDatasetError("head index is empty")
        self.transport = transport
        self.head = head
        self.codebook = codebook
        self.sdc_table = sdc_table

    def search(self, q, params: SearchParams) -> tuple[list[ScoredId], QueryStats]:
        q = np.ascontiguousarray(q, dtype=np.float32).reshape(-1)
        q_sdc = encode(q, self.codebook)
        st = QueryState(params.k, params.L)
        stats = QueryStats()
        seed_ids, seed_d = self.head.seeds(q, q_sdc, params.k_head, self.sdc_table)
        st.insert_candidates(seed_ids, seed_d)
        num_shards = self.transport.num_shards
        for _ in range(params.H):
            t = st.peekworst()
            if params.prune_with_results:
                t = min(t, st.result_worst())
            if st.c_ids.size == 0:
                break
            keys = st.pop_best(params.BW)
            owner = shard_of_many(keys, num_shards)
            groups = {int(s): keys[owner == s] for s in np.unique(owner)}
            hop: HopResult = self.transport.score_hop(groups, t, params.L, q, q_sdc)
            ok = [r for r in hop.results.values() if r is not None]
            if ok:
                st.insert_results(*_merge_arrays(np.concatenate([r.r_ids for r in ok]),
                                                 np.concatenate([r.r_dists for r in ok]), params.k))
                st.insert_candidates(*_merge_arrays(np.concatenate([r.c_ids for r in ok]),
                                                    np.concatenate([r.c_dists for r in ok]), params.L))
            stats.hops_executed += 1
            stats.io_used += int(keys.size)
            stats.visited.extend(keys.tolist())
            stats.latency_ms += hop.latency_ms
            stats.bytes_sent += hop.bytes_sent
            stats.bytes_recv += hop.bytes_recv
            stats.calls += len(hop.results)
            stats.failed_calls += len(hop.failed)
            stats.hop_log.append(HopRecord(int(keys.size), sorted(groups), hop.failed,
                                           hop.latency_ms, hop.bytes_sent, hop.bytes_recv))
        results = st.results()
        if stats.calls and stats.failed_calls == stats.calls:
            raise SearchFailedError(f"all {stats.calls} shard calls failed", results)
        return results, stats


def search(q, params: SearchParams, shards: ShardSet, head: HeadIndex, cb: Codebook,
           sdc: np.ndarray, transport=None) -> tuple[list[ScoredId], QueryStats]:
    """One query; defaults to a zero-latency, failure-free in-process transport."""
    transport = transport or LocalTransport(shards)
    return Orchestrator(transport, head, cb, sdc).search(q, params)
