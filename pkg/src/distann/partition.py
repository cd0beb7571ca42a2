"""Clustered partitioning with closure assignment, per-partition graphs,
stitching into one unified graph, and head-set collection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from distann.kmeans import kmeans
from distann.vamana import Graph, bfs_layers, bfs_levels, build_vamana, medoid, repair_reachability
from distann.vectors import VectorDataset, l2_sq_rows, read_vectors, write_vectors

log = logging.getLogger(__name__)


@dataclass(eq=False)
class PartitionAssignment:
    centroids: np.ndarray   # (P, dim)
    labels: np.ndarray      # (count, max_assign) partition ids, nearest first, -1 padded

    @property
    def P(self) -> int:
        return self.centroids.shape[0]

    def membership(self, row: int) -> list[int]:
        lab = self.labels[row]
        return lab[lab >= 0].tolist()

    def partition_rows(self, p: int) -> np.ndarray:
        return np.flatnonzero(np.any(self.labels == p, axis=1))

    def sizes(self) -> np.ndarray:
        lab = self.labels[self.labels >= 0]
        return np.bincount(lab, minlength=self.P)

    def amplification(self) -> float:
        return float(self.sizes().sum() / self.labels.shape[0])


@dataclass(eq=False)
class StitchedGraph(Graph):
    provenance: np.ndarray = field(default=None)   # partitions each node came from

    @property
    def R_serve(self) -> int:
        return self.R


def closure_labels(dists: np.ndarray, epsilon: float, max_assign: int) -> np.ndarray:
    """Per-row partition lists from a (count, P) squared-distance matrix.

    Partition ``i`` qualifies when ``d_i <= (1+eps)^2 * d_nearest``; the
    nearest always qualifies, and with ``epsilon == 0`` only the nearest does.
    """
    n, P = dists.shape
    order = np.lexsort((np.broadcast_to(np.arange(P), (n, P)), dists), axis=1)
    sd = np.take_along_axis(dists, order, axis=1).astype(np.float64)
    ok = sd <= ((1.0 + epsilon) ** 2) * sd[:, :1]
    ok[:, 0] = True
    if epsilon == 0:
        ok[:, 1:] = False
    ok[:, max_assign:] = False
    width = min(max_assign, P)
    labels = np.where(ok, order, -1)[:, :width]
    return labels.astype(np.int64)


def cluster_assign(ds: VectorDataset, P: int, epsilon: float = 0.1, max_assign: int = 8,
                   seed: int = 0, iters: int = 15) -> PartitionAssignment:
    if P < 1 or P > ds.count:
        raise ValueError(f"P={P} must be in [1, {ds.count}]")
    if epsilon < 0 or max_assign < 1:
        raise ValueError("need epsilon >= 0 and max_assign >= 1")
    cents = kmeans(ds.data, P, iters=iters, seed=seed).centroids
    dists = np.stack([l2_sq_rows(ds.data, c) for c in cents], axis=1)
    return PartitionAssignment(cents, closure_labels(dists, epsilon, max_assign))


def build_partitions(ds: VectorDataset, pa: PartitionAssignment, R: int = 32,
                     L_build: int | None = None, alpha: float = 1.2, seed: int = 0,
                     **build_kw) -> list[Graph | None]:
    """One graph per partition over its (closure) members; empty partitions yield ``None``."""
    graphs = []
    for p in range(pa.P):
        rows = pa.partition_rows(p)
        if rows.size == 0:
            log.warning("partition %d is empty; skipped", p)
            graphs.append(None)
            continue
        graphs.append(build_vamana(ds.subset(rows), R, L_build, alpha, seed + p, **build_kw))
    return graphs


def _global_rows(ds: VectorDataset, g: Graph, row_of: dict[int, int]) -> np.ndarray:
    return np.fromiter((row_of[int(i)] for i in g.vectors.ids), dtype=np.int64, count=g.count)


def stitch(graphs, pa: PartitionAssignment, ds: VectorDataset, R_serve: int) -> StitchedGraph:
    """Union each vector's neighbor lists across its partitions, capped at ``R_serve``.

    Vectors present in one partition keep their list order; merged lists are
    re-sorted by exact distance (ties by row) before truncation.
    """
    if len(graphs) != pa.P:
        raise ValueError(f"{len(graphs)} graphs for {pa.P} partitions")
    n = ds.count
    row_of = ds.row_of()
    adj = np.full((n, R_serve), -1, dtype=np.int64)
    deg = np.zeros(n, dtype=np.int64)
    prov = np.zeros(n, dtype=np.int64)
    pending: dict[int, list[np.ndarray]] = {}
    for g in graphs:
        if g is None:
            continue
        grows = _global_rows(ds, g, row_of)
        nb = np.where(g.adj >= 0, grows[np.maximum(g.adj, 0)], -1)
        prov[grows] += 1
        for local, v in enumerate(grows.tolist()):
            pending.setdefault(v, []).append(nb[local, :g.deg[local]])
    if np.any(prov == 0):
        raise ValueError("some vectors belong to no partition graph")
    for v, lists in pending.items():
        if len(lists) == 1:
            merged = lists[0][:R_serve]
        else:
            cand = np.unique(np.concatenate(lists))
            cand = cand[cand != v]
            d = l2_sq_rows(ds.data[cand], ds.data[v])
            merged = cand[np.lexsort((cand, d))][:R_serve]
        adj[v, :merged.size] = merged
        deg[v] = merged.size
    return StitchedGraph(ds, adj, deg, medoid(ds), provenance=prov)


def collect_head(graphs, C: int) -> list[int]:
    """Round-robin BFS over partition graphs, one level per partition per round.

    Returns up to ``C`` distinct ids in collection order; every (non-empty)
    partition contributes its entry point first when ``C`` allows.
    """
    if C < 1:
        raise ValueError("C must be >= 1")
    live = [g for g in graphs if g is not None]
    walkers = [(g, bfs_layers(g.adj, g.entry)) for g in live]
    seen: set[int] = set()
    out: list[int] = []
    while walkers and len(out) < C:
        still = []
        for g, walk in walkers:
            level = next(walk, None)
            if level is None:
                continue
            still.append((g, walk))
            for i in g.vectors.ids[level].tolist():
                if i not in seen:
                    seen.add(i)
                    out.append(i)
            if len(out) >= C:
                break
        walkers = still
    return out[:C]


def head_reachable_fraction(g: Graph, head_ids) -> float:
    row_of = g.vectors.row_of()
    rows = [row_of[int(i)] for i in head_ids]
    return float((bfs_levels(g.adj, rows) >= 0).mean())


def ensure_reachable(g: Graph, head_ids, L: int = 64) -> int:
    """Add in-edges until every node is reachable from the head set.

    Truncating neighbor lists to ``R_serve`` can orphan nodes that were
    reachable inside their partition graph. Returns the edges added.
    """
    row_of = g.vectors.row_of()
    rows = [row_of[int(i)] for i in head_ids]
    added = repair_reachability(g.vectors.data, g.adj, g.deg, rows, g.entry, max(L, g.R))
    if added:
        log.info("stitched graph: attached %d nodes unreachable from the head set", added)
    return added


def build_head_index(ds: VectorDataset, head_ids, R: int = 32, L_build: int | None = None,
                     alpha: float = 1.2, seed: int = 0, **build_kw) -> Graph:
    row_of = ds.row_of()
    rows = np.array([row_of[int(i)] for i in head_ids], dtype=np.int64)
    return build_vamana(ds.subset(rows), R, L_build, alpha, seed, **build_kw)


def write_manifest(out_dir, pa: PartitionAssignment, ds: VectorDataset, epsilon=None) -> Path:
    """Write manifest.txt, centroids.vec and members.bin into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_vectors(out / "centroids.vec", VectorDataset(pa.centroids))
    dim = pa.centroids.shape[1]
    header = 28 + pa.P * 8   # vector-file header plus the id block
    lines = [f"# P={pa.P} count={ds.count} max_assign={pa.labels.shape[1]} epsilon={epsilon}"]
    with open(out / "members.bin", "wb") as fh:
        for p in range(pa.P):
            rows = pa.partition_rows(p)
            fh.write(ds.ids[rows].astype("<u8").tobytes())
            lines.append(f"partition={p} centroid_offset={header + p * dim * 4} members={rows.size}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    return out / "manifest.txt"


def read_manifest(in_dir, ds: VectorDataset) -> PartitionAssignment:
    src = Path(in_dir)
    cents = read_vectors(src / "centroids.vec").data
    counts = []
    for line in (src / "manifest.txt").read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        kv = dict(part.split("=", 1) for part in line.split())
        counts.append(int(kv["members"]))
    members = np.fromfile(src / "members.bin", dtype="<u8")
    if members.size != sum(counts):
        raise ValueError("members.bin does not match the manifest counts")
    row_of = ds.row_of()
    per_row: list[list[int]] = [[] for _ in range(ds.count)]
    off = 0
    for p, c in enumerate(counts):
        for i in members[off:off + c].tolist():
            per_row[row_of[i]].append(p)
        off += c
    # nearest first: order each row's partitions by centroid distance
    width = max(len(x) for x in per_row)
    labels = np.full((ds.count, width), -1, dtype=np.int64)
    for r, parts in enumerate(per_row):
        if len(parts) > 1:
            d = l2_sq_rows(cents[parts], ds.data[r])
            parts = [parts[i] for i in np.lexsort((parts, d))]
        labels[r, :len(parts)] = parts
    return PartitionAssignment(cents, labels)
