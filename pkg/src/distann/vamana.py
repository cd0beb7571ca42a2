"""Degree-bounded proximity graph (Vamana) construction and beam search."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from distann import kernels
from distann.errors import BadMagicError, EmptyDatasetError, TruncatedError
from distann.vectors import ScoredId, VectorDataset, l2_sq_rows

log = logging.getLogger(__name__)

UNLIMITED = np.iinfo(np.int64).max
GRAPH_MAGIC = b"DANNGRF1"
# magic, count u64, R u32, entry row u32
_GRAPH_HEADER = struct.Struct("<8sQII")


@dataclass(eq=False)
class Graph:
    """Adjacency over the rows of ``vectors``; ``adj`` is -1 padded past ``deg``."""

    vectors: VectorDataset
    adj: np.ndarray   # (n, R) int64
    deg: np.ndarray   # (n,) int64
    entry: int        # row of the entry point

    @property
    def R(self) -> int:
        return self.adj.shape[1]

    @property
    def count(self) -> int:
        return self.adj.shape[0]

    @property
    def entry_id(self) -> int:
        return int(self.vectors.ids[self.entry])

    def neighbors(self, row: int) -> np.ndarray:
        return self.adj[row, :self.deg[row]]

    def neighbor_lists(self) -> list[list[int]]:
        return [self.adj[r, :self.deg[r]].tolist() for r in range(self.count)]

    def reachable_fraction(self, starts=None) -> float:
        starts = [self.entry] if starts is None else starts
        return float((bfs_levels(self.adj, starts) >= 0).mean())


@dataclass
class SearchTrace:
    visited: list[int]          # ids, in expansion order
    results: list[ScoredId]


def from_neighbor_lists(vectors: VectorDataset, lists, entry: int, R: int | None = None) -> Graph:
    R = R if R is not None else max((len(x) for x in lists), default=0)
    adj = np.full((len(lists), max(R, 1)), -1, dtype=np.int64)
    deg = np.zeros(len(lists), dtype=np.int64)
    for r, nbrs in enumerate(lists):
        if len(nbrs) > R:
            raise ValueError(f"row {r} has {len(nbrs)} neighbors > R={R}")
        adj[r, :len(nbrs)] = nbrs
        deg[r] = len(nbrs)
    return Graph(vectors, adj, deg, int(entry))


def bfs_levels(adj: np.ndarray, starts) -> np.ndarray:
    """BFS depth per row from ``starts`` (-1 where unreachable)."""
    level = np.full(adj.shape[0], -1, dtype=np.int64)
    frontier = np.unique(np.asarray(starts, dtype=np.int64))
    level[frontier] = 0
    depth = 0
    while frontier.size:
        nb = adj[frontier].ravel()
        nb = nb[nb >= 0]
        nb = np.unique(nb)
        nb = nb[level[nb] < 0]
        depth += 1
        level[nb] = depth
        frontier = nb
    return level


def bfs_layers(adj: np.ndarray, start: int):
    """Yield BFS levels from ``start`` as row arrays in first-discovery order."""
    seen = np.zeros(adj.shape[0], dtype=bool)
    frontier = np.array([start], dtype=np.int64)
    seen[start] = True
    while frontier.size:
        yield frontier
        nb = adj[frontier].ravel()
        nb = nb[nb >= 0]
        nb = nb[~seen[nb]]
        _, first = np.unique(nb, return_index=True)
        nb = nb[np.sort(first)]
        seen[nb] = True
        frontier = nb


def medoid(ds: VectorDataset) -> int:
    """Row closest to the dataset mean (ties to the lowest row)."""
    centroid = ds.data.astype(np.float64).mean(axis=0).astype(np.float32)
    return int(np.argmin(l2_sq_rows(ds.data, centroid)))


def _spread(adj: np.ndarray, reach: np.ndarray, start: int) -> None:
    """Mark everything reachable from ``start`` (in place)."""
    reach[start] = True
    frontier = np.array([start], dtype=np.int64)
    while frontier.size:
        nb = adj[frontier].ravel()
        nb = np.unique(nb[nb >= 0])
        nb = nb[~reach[nb]]
        reach[nb] = True
        frontier = nb


def _victim_edge(adj, hosts, is_start, indeg) -> tuple[int, int]:
    """Pick (host, slot) whose edge can go: first one pointing at a search start
    (always reachable), else the last edge of a host whose target keeps another in-edge."""
    R = adj.shape[1]
    for u in hosts:
        slots = np.flatnonzero(is_start[adj[u]])
        if slots.size:
            return u, int(slots[-1])
    u = next((u for u in hosts if indeg[adj[u, R - 1]] > 1), hosts[0])
    return u, R - 1


def repair_reachability(data, adj, deg, starts, entry: int, L: int, max_rounds: int = 16) -> int:
    """Attach rows that BFS from ``starts`` cannot reach; edits adj/deg in place.

    Each orphan gets an in-edge from the closest reachable node found by a
    beam search from ``entry``, preferring hosts with spare degree, else
    replacing one host edge (see ``_victim_edge``). Returns the number of
    edges added.
    """
    R = adj.shape[1]
    starts = np.asarray(starts, dtype=np.int64)
    reach = bfs_levels(adj, starts) >= 0
    indeg = np.bincount(adj[adj >= 0], minlength=adj.shape[0])
    is_start = np.zeros(adj.shape[0], dtype=bool)
    is_start[starts] = True
    added = 0
    for _ in range(max_rounds):
        todo = np.flatnonzero(~reach)
        if todo.size == 0:
            break
        for v in todo.tolist():
            if reach[v]:
                continue
            vis, _, _, _ = kernels.greedy_search(data, adj, deg, np.array([entry]), data[v], L, 1, UNLIMITED)
            vis = vis[reach[vis]]
            if vis.size == 0:
                vis = np.flatnonzero(reach)
            d = l2_sq_rows(data[vis], data[v])
            hosts = [int(vis[i]) for i in np.lexsort((vis, d))]
            host = next((u for u in hosts if deg[u] < R), None)
            if host is None:
                host, slot = _victim_edge(adj, hosts, is_start, indeg)
                # move the dropped edge to the last slot, then overwrite it
                adj[host, slot], adj[host, R - 1] = adj[host, R - 1], adj[host, slot]
                indeg[adj[host, R - 1]] -= 1
                deg[host] = R - 1
            adj[host, deg[host]] = v
            deg[host] += 1
            indeg[v] += 1
            added += 1
            _spread(adj, reach, v)
        # a replaced edge may have cut something off; verify before the next round
        reach = bfs_levels(adj, starts) >= 0
    return added


def build_vamana(ds: VectorDataset, R: int = 32, L_build: int | None = None, alpha: float = 1.2,
                 seed: int = 0, passes: int = 2, slack: float = 1.3) -> Graph:
    """Incremental Vamana build from the medoid.

    Pass one prunes with alpha=1, later passes with ``alpha``; insertion
    order is a seeded permutation. Back-edges may grow a node to
    ``slack * R`` edges before it is re-pruned (``slack=1`` prunes on every
    overflow of ``R``). Any node left unreachable from the entry point is
    attached to its nearest reachable node afterwards.
    """
    if ds.count == 0:
        raise EmptyDatasetError("cannot build a graph over an empty dataset")
    L_build = 2 * R if L_build is None else L_build
    if R < 2 or L_build < R or alpha < 1.0:
        raise ValueError("need R >= 2, L_build >= R, alpha >= 1")
    entry = medoid(ds)
    if ds.count == 1:
        return Graph(ds, np.full((1, R), -1, dtype=np.int64), np.zeros(1, dtype=np.int64), entry)
    order = np.random.default_rng(seed).permutation(ds.count).astype(np.int64)
    adj, deg = kernels.build_vamana(ds.data, R, L_build, float(alpha), order, entry, passes,
                                    max(R, int(slack * R)))
    fixed = repair_reachability(ds.data, adj, deg, [entry], entry, L_build)
    if fixed:
        log.info("attached %d unreachable nodes", fixed)
    return Graph(ds, adj, deg, entry)


def robust_prune(p: int, candidates, alpha: float, R: int, ds: VectorDataset) -> list[int]:
    """Alpha-prune ``candidates`` (ids, or ScoredId with distances to ``p``) for node ``p``."""
    rows = ds.row_of()
    cand = [c.id if isinstance(c, ScoredId) else int(c) for c in candidates]
    if p in cand:
        raise ValueError("candidates must exclude p")
    crow = np.array([rows[c] for c in cand], dtype=np.int64)
    d = l2_sq_rows(ds.data[crow], ds.data[rows[p]]) if crow.size else np.empty(0, np.float32)
    kept = kernels.robust_prune(ds.data, rows[p], crow, d, float(alpha), R)
    return [int(ds.ids[r]) for r in kept]


def search_rows(g: Graph, q, L: int, k: int, io_limit: int | None = None, entries=None):
    """Row-level beam search: (visited rows, visited dists, result rows, result dists)."""
    if k > L:
        raise ValueError("k must be <= L")
    io = UNLIMITED if io_limit is None else int(io_limit)
    ent = np.array([g.entry] if entries is None else entries, dtype=np.int64)
    q = np.ascontiguousarray(q, dtype=np.float32).reshape(-1)
    return kernels.greedy_search(g.vectors.data, g.adj, g.deg, ent, q, int(L), int(k), io)


def greedy_search(g: Graph, q, L: int, k: int, io_limit: int | None = None) -> SearchTrace:
    vis, _, rows, dists = search_rows(g, q, L, k, io_limit)
    ids = g.vectors.ids
    return SearchTrace([int(ids[r]) for r in vis],
                       [ScoredId(int(ids[r]), float(d)) for r, d in zip(rows, dists)])


def write_graph(path, g: Graph) -> None:
    """Graph file: header, node ids u64, degrees u32, then neighbor ids u64 (R per node, 0 padded)."""
    nbr = np.where(g.adj >= 0, g.vectors.ids[np.maximum(g.adj, 0)], 0).astype("<u8")
    with open(path, "wb") as fh:
        fh.write(_GRAPH_HEADER.pack(GRAPH_MAGIC, g.count, g.R, g.entry))
        fh.write(g.vectors.ids.astype("<u8").tobytes())
        fh.write(g.deg.astype("<u4").tobytes())
        fh.write(nbr.tobytes())


def read_graph(path, base: VectorDataset) -> Graph:
    """Load a graph whose node ids are a subset of ``base``."""
    buf = Path(path).read_bytes()
    if len(buf) < _GRAPH_HEADER.size:
        raise TruncatedError("graph file shorter than its header")
    magic, n, R, entry = _GRAPH_HEADER.unpack_from(buf)
    if magic != GRAPH_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    off = _GRAPH_HEADER.size
    if len(buf) != off + n * 8 + n * 4 + n * R * 8:
        raise TruncatedError("graph file size does not match its header")
    ids = np.frombuffer(buf, "<u8", n, off)
    deg = np.frombuffer(buf, "<u4", n, off + n * 8).astype(np.int64)
    nbr = np.frombuffer(buf, "<u8", n * R, off + n * 12).reshape(n, R)
    row_of = base.row_of()
    rows = np.array([row_of[int(i)] for i in ids], dtype=np.int64)
    order = np.argsort(ids, kind="stable")
    local = order[np.clip(np.searchsorted(ids[order], nbr), 0, max(n - 1, 0))]
    valid = np.arange(R)[None, :] < deg[:, None]
    if np.any(valid & (ids[local] != nbr)):
        raise ValueError("graph references ids that are not among its nodes")
    adj = np.where(valid, local, -1).astype(np.int64)
    return Graph(base.subset(rows), adj, deg, int(entry))
