"""Experiment harness: synthetic data, ground truth, recall, index build and sweeps."""

from __future__ import annotations

import logging
import struct
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from distann.errors import BadMagicError, DimensionMismatchError, SearchFailedError, TruncatedError
from distann.nodestore import ShardSet, load_shards
from distann.orchestrator import HeadIndex, Orchestrator, SearchParams
from distann.partition import (PartitionAssignment, build_partitions, cluster_assign, collect_head,
                               ensure_reachable, stitch)
from distann.quantizer import Codebook, build_sdc_table, encode_batch, train_codebooks
from distann.transport import LocalTransport, TransportConfig
from distann.vamana import Graph, search_rows
from distann.vectors import VectorDataset, l2_sq_rows
from distann import kernels

log = logging.getLogger(__name__)

DISTRIBUTIONS = ("gaussian", "clustered-gaussian", "uniform")
GT_MAGIC = b"DANNGT01"
_GT_HEADER = struct.Struct("<8sII")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def _blob_centers(dim: int, seed: int, blobs: int, spread: float) -> np.ndarray:
    return np.random.default_rng([seed, 0]).normal(0.0, spread, size=(blobs, dim))


def _sample(n, dim, seed, distribution, blobs, spread, stream):
    if n < 1 or dim < 1:
        raise ValueError("need n >= 1 and dim >= 1")
    if distribution not in DISTRIBUTIONS:
        raise ValueError(f"unknown distribution {distribution!r}; choose from {DISTRIBUTIONS}")
    rng = np.random.default_rng([seed, stream])
    if distribution == "gaussian":
        return rng.standard_normal((n, dim)).astype(np.float32), None
    if distribution == "uniform":
        return rng.random((n, dim), dtype=np.float32), None
    centers = _blob_centers(dim, seed, blobs, spread)
    labels = rng.integers(0, blobs, n)
    x = centers[labels] + rng.standard_normal((n, dim))
    return x.astype(np.float32), labels


def gen_dataset(n: int, dim: int, seed: int = 0, distribution: str = "clustered-gaussian",
                blobs: int = 10, spread: float = 0.5, return_labels: bool = False):
    """Deterministic synthetic corpus; clustered-gaussian draws unit-variance blobs
    around ``blobs`` centers scattered with std ``spread``."""
    x, labels = _sample(n, dim, seed, distribution, blobs, spread, 1)
    ds = VectorDataset(x)
    return (ds, labels) if return_labels else ds


def gen_queries(n: int, dim: int, seed: int = 0, distribution: str = "clustered-gaussian",
                blobs: int = 10, spread: float = 0.5, return_labels: bool = False):
    """Queries from the same distribution (same blob centers) as ``gen_dataset``."""
    x, labels = _sample(n, dim, seed, distribution, blobs, spread, 2)
    ds = VectorDataset(x)
    return (ds, labels) if return_labels else ds


@dataclass
class GroundTruth:
    ids: np.ndarray     # (nq, k) uint64
    dists: np.ndarray   # (nq, k) float32

    @property
    def k(self) -> int:
        return self.ids.shape[1]


def compute_ground_truth(ds: VectorDataset, queries: VectorDataset, k: int) -> GroundTruth:
    if k > ds.count:
        raise ValueError(f"k={k} exceeds the corpus size {ds.count}")
    if queries.dim != ds.dim:
        raise DimensionMismatchError(f"query dim {queries.dim} != corpus dim {ds.dim}")
    ids = np.empty((queries.count, k), dtype=np.uint64)
    dists = np.empty((queries.count, k), dtype=np.float32)
    for i in range(queries.count):
        d = kernels.l2_to_rows(ds.data, queries.data[i])
        part = np.argpartition(d, k - 1)[:k] if k < ds.count else np.arange(ds.count)
        # widen to every row tied with the k-th distance so the id tie-break is exact
        kth = d[part].max()
        part = np.flatnonzero(d <= kth)
        order = part[np.lexsort((ds.ids[part], d[part]))][:k]
        ids[i], dists[i] = ds.ids[order], d[order]
    return GroundTruth(ids, dists)


def write_ground_truth(path, gt: GroundTruth) -> None:
    with open(path, "wb") as fh:
        fh.write(_GT_HEADER.pack(GT_MAGIC, gt.ids.shape[0], gt.k))
        fh.write(gt.ids.astype("<u8").tobytes())
        fh.write(gt.dists.astype("<f4").tobytes())


def read_ground_truth(path) -> GroundTruth:
    buf = Path(path).read_bytes()
    if len(buf) < _GT_HEADER.size:
        raise TruncatedError("ground-truth file shorter than its header")
    magic, nq, k = _GT_HEADER.unpack_from(buf)
    if magic != GT_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    off = _GT_HEADER.size
    if len(buf) != off + nq * k * 12:
        raise TruncatedError("ground-truth file size does not match its header")
    ids = np.frombuffer(buf, "<u8", nq * k, off).reshape(nq, k).copy()
    dists = np.frombuffer(buf, "<f4", nq * k, off + nq * k * 8).reshape(nq, k).copy()
    return GroundTruth(ids, dists)


def recall_at_k(results, gt, k: int) -> float:
    """Mean over queries of |top-k result ids & top-k true ids| / k; short lists count as misses."""
    gt_ids = gt.ids if isinstance(gt, GroundTruth) else np.asarray(gt)
    if gt_ids.ndim != 2 or gt_ids.shape[1] < k:
        raise ValueError(f"ground truth needs >= {k} entries per query")
    if len(results) != gt_ids.shape[0]:
        raise ValueError("one result list per query required")
    if not len(results):
        return 0.0
    hits = 0
    for res, truth in zip(results, gt_ids):
        mine = {int(r[0]) if isinstance(r, tuple) else int(r) for r in list(res)[:k]}
        hits += len(mine & set(truth[:k].tolist()))
    return hits / (k * len(results))


@dataclass
class BuiltIndex:
    ds: VectorDataset
    assignment: PartitionAssignment
    partitions: list[Graph | None]
    stitched: Graph
    head_ids: list[int]
    head: HeadIndex
    codebook: Codebook
    sdc_table: np.ndarray
    codes: np.ndarray
    shards: ShardSet
    timings: dict[str, float] = field(default_factory=dict)
    repaired_edges: int = 0

    def orchestrator(self, config: TransportConfig | None = None, seed: int = 0) -> Orchestrator:
        return Orchestrator(LocalTransport(self.shards, config, seed), self.head, self.codebook,
                            self.sdc_table)


def _stage(name, timings, fn, *args, **kw):
    t0 = time.perf_counter()
    try:
        out = fn(*args, **kw)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc
    timings[name] = time.perf_counter() - t0
    log.info("%s: %.2fs", name, timings[name])
    return out


def build_index(ds: VectorDataset, P: int = 8, epsilon: float = 0.1, R: int = 32, R_serve: int = 24,
                head_fraction: float = 0.05, M: int = 16, num_shards: int = 8, seed: int = 0,
                L_build: int | None = None, alpha: float = 1.2, max_assign: int = 8,
                pq_sample: int = 20000, opq_iters: int = 0, head_R: int | None = None) -> BuiltIndex:
    """cluster -> per-partition build -> stitch -> head -> encode -> shard load."""
    tm: dict[str, float] = {}
    pa = _stage("cluster", tm, cluster_assign, ds, P, epsilon, max_assign, seed)
    graphs = _stage("build", tm, build_partitions, ds, pa, R, L_build, alpha, seed)
    sg = _stage("stitch", tm, stitch, graphs, pa, ds, R_serve)
    head_count = max(1, int(round(head_fraction * ds.count)))
    head_ids = _stage("head", tm, collect_head, graphs, head_count)
    added = _stage("repair", tm, ensure_reachable, sg, head_ids, L_build or 2 * R)
    rng = np.random.default_rng([seed, 7])
    sample_rows = np.sort(rng.choice(ds.count, min(pq_sample, ds.count), replace=False))
    cb = _stage("encode", tm, train_codebooks, ds.subset(sample_rows), M, 15, seed, opq_iters)
    codes = encode_batch(ds.data, cb)
    table = build_sdc_table(cb)
    row_of = ds.row_of()
    head_rows = np.array([row_of[i] for i in head_ids], dtype=np.int64)
    head = _stage("head-index", tm, HeadIndex.build, ds.subset(head_rows), cb,
                  head_R or R, None, alpha, seed, codes[head_rows])
    shards = _stage("load", tm, load_shards, sg, ds, cb, num_shards, table, codes)
    return BuiltIndex(ds, pa, graphs, sg, head_ids, head, cb, table, codes, shards, tm, added)


@dataclass
class QueryRun:
    results: list[list]
    io: np.ndarray
    latency_ms: np.ndarray
    bytes_sent: np.ndarray
    bytes_recv: np.ndarray
    origins: np.ndarray   # distinct home partitions touched per query
    failed_queries: int = 0


def run_queries(orch: Orchestrator, queries: VectorDataset, params: SearchParams,
                assignment: PartitionAssignment | None = None, row_of=None) -> QueryRun:
    res, io, lat, bs, br, origins = [], [], [], [], [], []
    failed = 0
    for q in queries.data:
        try:
            r, st = orch.search(q, params)
        except SearchFailedError as exc:
            failed += 1
            res.append([x.id for x in exc.partial])
            io.append(0)
            lat.append(0.0)
            bs.append(0)
            br.append(0)
            origins.append(0)
            continue
        res.append([x.id for x in r])
        io.append(st.io_used)
        lat.append(st.latency_ms)
        bs.append(st.bytes_sent)
        br.append(st.bytes_recv)
        if assignment is not None and st.visited:
            rows = np.array([row_of[v] for v in st.visited], dtype=np.int64)
            origins.append(np.unique(assignment.labels[rows, 0]).size)
        else:
            origins.append(0)
    return QueryRun(res, np.array(io), np.array(lat), np.array(bs), np.array(br), np.array(origins), failed)


def partitioned_search(index: BuiltIndex, q, N: int, M: int, k: int, L: int | None = None):
    """Clustered-partitioning baseline: greedy search with io_limit=M in each of the N nearest partitions."""
    pa = index.assignment
    if N > pa.P:
        raise ValueError(f"N={N} exceeds P={pa.P}")
    q = np.ascontiguousarray(q, dtype=np.float32)
    d = l2_sq_rows(pa.centroids.astype(np.float32), q)
    parts = np.lexsort((np.arange(pa.P), d))
    ids, dists, io = [], [], 0
    for p in parts:
        if len(ids) == N:
            break
        g = index.partitions[p]
        if g is None:
            continue
        beam = max(k, M) if L is None else max(L, k)
        vis, _, rows, rd = search_rows(g, q, beam, min(k, beam), io_limit=M)
        io += len(vis)
        ids.append(g.vectors.ids[rows])
        dists.append(rd)
    ids = np.concatenate(ids) if ids else np.empty(0, np.uint64)
    dists = np.concatenate(dists) if dists else np.empty(0, np.float32)
    order = np.lexsort((ids, dists))
    _, first = np.unique(ids[order], return_index=True)
    keep = order[np.sort(first)][:k]
    return ids[keep].tolist(), io


_LIST_FIELDS = {"H_values", "BW_values", "failure_rates", "N_values", "M_values"}


@dataclass
class ExperimentSpec:
    n: int = 100_000
    dim: int = 64
    seed: int = 0
    distribution: str = "clustered-gaussian"
    blobs: int = 10
    spread: float = 0.5
    queries: int = 1000
    k: int = 10
    P: int = 8
    epsilon: float = 0.1
    R: int = 32
    R_serve: int = 24
    head_fraction: float = 0.05
    M: int = 16
    num_shards: int = 8
    L: int = 64
    k_head: int = 32
    H_values: list = field(default_factory=lambda: [6])
    BW_values: list = field(default_factory=lambda: [32])
    failure_rates: list = field(default_factory=lambda: [0.0])
    N_values: list = field(default_factory=lambda: [1, 2, 4])
    M_values: list = field(default_factory=lambda: [64, 128])
    output: str = ""

    def __post_init__(self):
        grids = [self.H_values, self.BW_values, self.failure_rates]
        if any(len(g) == 0 for g in grids):
            raise ValueError("search grids must be non-empty")
        if self.queries < 1:
            raise ValueError("need at least one query")

    @classmethod
    def from_text(cls, text: str) -> ExperimentSpec:
        types = {f.name: f for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if not sep or key not in types:
                raise ValueError(f"bad spec line {line!r}")
            if key in _LIST_FIELDS:
                conv = float if key == "failure_rates" else int
                kw[key] = [conv(x) for x in val.split(",") if x.strip()]
            else:
                default = types[key].default
                kw[key] = type(default)(val) if not isinstance(default, str) else val
        return cls(**kw)

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{f.name}={','.join(map(str, v)) if isinstance(v, list) else v}")
        return "\n".join(out) + "\n"

    @classmethod
    def load(cls, path) -> ExperimentSpec:
        return cls.from_text(Path(path).read_text())


def format_row(row: dict) -> str:
    parts = []
    for k, v in row.items():
        parts.append(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}")
    return " ".join(parts)


def parse_row(line: str) -> dict:
    row = {}
    for tok in line.split():
        k, _, v = tok.partition("=")
        try:
            row[k] = int(v)
        except ValueError:
            try:
                row[k] = float(v)
            except ValueError:
                row[k] = v
    return row


@dataclass
class RunReport:
    rows: list[dict] = field(default_factory=list)

    def add(self, **row) -> dict:
        self.rows.append(row)
        return row

    def to_text(self) -> str:
        return "".join(format_row(r) + "\n" for r in self.rows)

    @classmethod
    def from_text(cls, text: str) -> RunReport:
        return cls([parse_row(x) for x in text.splitlines() if x.strip()])

    def select(self, **match) -> list[dict]:
        return [r for r in self.rows if all(r.get(k) == v for k, v in match.items())]

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())


def prepare(spec: ExperimentSpec):
    """Generate corpus and queries, compute ground truth, build the index."""
    tm: dict[str, float] = {}
    ds = _stage("gen", tm, gen_dataset, spec.n, spec.dim, spec.seed, spec.distribution,
                spec.blobs, spec.spread)
    qs = _stage("gen", tm, gen_queries, spec.queries, spec.dim, spec.seed, spec.distribution,
                spec.blobs, spec.spread)
    gt = _stage("gt", tm, compute_ground_truth, ds, qs, spec.k)
    index = build_index(ds, P=spec.P, epsilon=spec.epsilon, R=spec.R, R_serve=spec.R_serve,
                        head_fraction=spec.head_fraction, M=spec.M, num_shards=spec.num_shards,
                        seed=spec.seed)
    index.timings.update(tm)
    return ds, qs, gt, index


def sweep(index: BuiltIndex, qs: VectorDataset, gt: GroundTruth, spec: ExperimentSpec,
          report: RunReport | None = None, transport_config: TransportConfig | None = None) -> RunReport:
    report = report or RunReport()
    base = transport_config or TransportConfig()
    row_of = index.ds.row_of()
    for f in spec.failure_rates:
        for H in spec.H_values:
            for BW in spec.BW_values:
                params = SearchParams(BW=BW, H=H, k=spec.k, L=max(spec.L, BW), k_head=spec.k_head)
                cfg = TransportConfig(base.fixed_ms, base.jitter_ms, f, base.replicas,
                                      base.hedge_delay_ms, base.timeout_ms)
                orch = index.orchestrator(cfg, seed=spec.seed)
                run = run_queries(orch, qs, params, index.assignment, row_of)
                report.add(mode="distributed", H=H, BW=BW, L=params.L, k=spec.k, failure_rate=f,
                           recall=recall_at_k(run.results, gt, spec.k), io_mean=float(run.io.mean()),
                           io_max=int(run.io.max()), io_bound=H * BW,
                           latency_mean_ms=float(run.latency_ms.mean()),
                           latency_p99_ms=float(np.percentile(run.latency_ms, 99)),
                           bytes_per_query=float((run.bytes_sent + run.bytes_recv).mean()),
                           origins_mean=float(run.origins.mean()),
                           origins_var=float(run.origins.var()), failed_queries=run.failed_queries)
    return report


def run_pipeline(spec: ExperimentSpec, transport_config: TransportConfig | None = None) -> RunReport:
    _, qs, gt, index = prepare(spec)
    report = RunReport()
    _stage("sweep", index.timings, sweep, index, qs, gt, spec, report, transport_config)
    for stage, secs in index.timings.items():
        report.add(mode="stage", stage=stage, seconds=float(secs))
    if spec.output:
        report.write(spec.output)
    return report


def partitioned_sweep(index: BuiltIndex, qs: VectorDataset, gt: GroundTruth, N_values, M_values,
                      k: int, report: RunReport | None = None) -> RunReport:
    report = report or RunReport()
    for N in N_values:
        if N > index.assignment.P:
            raise ValueError(f"N={N} exceeds P={index.assignment.P}")
        for M in M_values:
            results, ios = [], []
            for q in qs.data:
                r, io = partitioned_search(index, q, N, M, k)
                results.append(r)
                ios.append(io)
            report.add(mode="partitioned", N=N, M=M, k=k, recall=recall_at_k(results, gt, k),
                       io_mean=float(np.mean(ios)), io_budget=N * M)
    return report


def compare_partitioned(spec: ExperimentSpec) -> RunReport:
    """Distributed sweep and partitioned baseline over the same built partitions."""
    _, qs, gt, index = prepare(spec)
    report = sweep(index, qs, gt, spec)
    partitioned_sweep(index, qs, gt, spec.N_values, spec.M_values, spec.k, report)
    if spec.output:
        report.write(spec.output)
    return report
