"""Command-line driver: ``distann <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 stage failure, 3 threshold failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from distann import bench
from distann.nodestore import ShardSet, load_shards, read_shard, write_shard
from distann.orchestrator import HeadIndex, Orchestrator, SearchParams
from distann.partition import (build_partitions, cluster_assign, collect_head, ensure_reachable,
                               read_manifest, stitch, write_manifest)
from distann.quantizer import (build_sdc_table, encode_batch, read_codebook, read_codes,
                               train_codebooks, write_codebook, write_codes)
from distann.server import QueryClient, QueryService, ShardService, make_server
from distann.transport import (LocalTransport, TcpTransport, TransportConfig, parse_address,
                               parse_shard_list)
from distann.vamana import read_graph, write_graph
from distann.vectors import read_vectors, write_vectors

EXIT_OK, EXIT_USAGE, EXIT_STAGE, EXIT_THRESHOLD = 0, 1, 2, 3
log = logging.getLogger("distann")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _graph_paths(graph_dir) -> list[Path]:
    return sorted(Path(graph_dir).glob("part-*.grf"))


def cmd_gen(a):
    ds = bench.gen_dataset(a.n, a.dim, a.seed, a.distribution, a.blobs, a.spread)
    write_vectors(a.out, ds)
    if a.queries:
        qs = bench.gen_queries(a.queries, a.dim, a.seed, a.distribution, a.blobs, a.spread)
        write_vectors(a.queries_out or str(Path(a.out).with_suffix(".queries.vec")), qs)
    print(f"wrote {ds.count} vectors of dim {ds.dim}")


def cmd_gt(a):
    gt = bench.compute_ground_truth(read_vectors(a.base), read_vectors(a.queries), a.k)
    bench.write_ground_truth(a.out, gt)
    print(f"wrote ground truth for {gt.ids.shape[0]} queries, k={gt.k}")


def cmd_cluster(a):
    ds = read_vectors(a.base)
    pa = cluster_assign(ds, a.P, a.epsilon, a.max_assign, a.seed)
    write_manifest(a.out, pa, ds, a.epsilon)
    print(f"P={pa.P} amplification={pa.amplification():.4f} sizes={pa.sizes().tolist()}")


def cmd_build(a):
    ds = read_vectors(a.base)
    pa = read_manifest(a.partitions, ds)
    graphs = build_partitions(ds, pa, a.R, a.L, a.alpha, a.seed)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for p, g in enumerate(graphs):
        if g is not None:
            write_graph(out / f"part-{p:04d}.grf", g)
    print(f"built {sum(g is not None for g in graphs)} partition graphs")


def _load_partition_graphs(ds, pa, graph_dir):
    graphs = [None] * pa.P
    for path in _graph_paths(graph_dir):
        graphs[int(path.stem.split("-")[1])] = read_graph(path, ds)
    return graphs


def cmd_stitch(a):
    ds = read_vectors(a.base)
    pa = read_manifest(a.partitions, ds)
    sg = stitch(_load_partition_graphs(ds, pa, a.graphs), pa, ds, a.R_serve)
    write_graph(a.out, sg)
    print(f"stitched {sg.count} nodes, R_serve={sg.R}, mean degree {sg.deg.mean():.2f}")


def cmd_head(a):
    ds = read_vectors(a.base)
    pa = read_manifest(a.partitions, ds)
    graphs = _load_partition_graphs(ds, pa, a.graphs)
    count = a.count or max(1, int(round(a.fraction * ds.count)))
    head_ids = collect_head(graphs, count)
    sg = read_graph(a.stitched, ds)
    added = ensure_reachable(sg, head_ids)
    if added:
        write_graph(a.stitched, sg)
    row_of = ds.row_of()
    write_vectors(a.out, ds.subset([row_of[i] for i in head_ids]))
    print(f"head of {len(head_ids)} vectors; attached {added} unreachable nodes")


def cmd_encode(a):
    ds = read_vectors(a.base)
    rng = np.random.default_rng([a.seed, 7])
    rows = np.sort(rng.choice(ds.count, min(a.sample, ds.count), replace=False))
    cb = train_codebooks(ds.subset(rows), a.M, a.iters, a.seed, a.opq_iters)
    write_codebook(a.codebook_out, cb)
    write_codes(a.codes_out, ds.ids, encode_batch(ds.data, cb))
    print(f"trained M={cb.M} codebook on {rows.size} vectors")


def cmd_load(a):
    ds = read_vectors(a.base)
    sg = read_graph(a.stitched, ds)
    cb = read_codebook(a.codebook)
    ids, codes = read_codes(a.codes)
    if not np.array_equal(ids, sg.vectors.ids):
        rows = sg.vectors.row_of()
        order = np.array([rows[int(i)] for i in ids], dtype=np.int64)
        aligned = np.zeros_like(codes)
        aligned[order] = codes
        codes = aligned
    shards = load_shards(sg, sg.vectors, cb, a.num_shards, build_sdc_table(cb), codes)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in shards.shards:
        write_shard(out / f"shard-{s.shard_id:04d}.nod", s)
    print(f"wrote {shards.num_shards} shards, {shards.total_packed_bytes()} packed bytes")


def cmd_inject(a):
    cfg = TransportConfig(a.latency_ms, a.jitter_ms, a.failure_rate, a.replicas, a.hedge_ms, a.timeout_ms)
    cfg.save(a.out)
    print(cfg.to_text(), end="")


def cmd_serve_shard(a):
    table = build_sdc_table(read_codebook(a.codebook))
    shard = read_shard(a.shard_file, table)
    host, port = parse_address(a.listen)
    srv = make_server(ShardService(shard, a.failure_rate, a.latency_ms, a.jitter_ms, a.seed), host, port)
    print(f"shard {shard.shard_id}/{shard.num_shards} ({shard.count} nodes) on "
          f"{srv.server_address[0]}:{srv.server_address[1]}", flush=True)
    try:
        srv.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        srv.server_close()


def _params(a) -> SearchParams:
    L = a.l if a.l is not None else max(64, a.bw, a.k)
    return SearchParams(BW=a.bw, H=a.hops, k=a.k, L=L, k_head=a.k_head)


def _transport_config(a) -> TransportConfig:
    base = TransportConfig.load(a.transport_config) if getattr(a, "transport_config", None) else TransportConfig()
    hedge = a.hedge_ms if a.hedge_ms is not None else base.hedge_delay_ms
    timeout = a.timeout_ms if a.timeout_ms is not None else base.timeout_ms
    return TransportConfig(base.fixed_ms, base.jitter_ms, base.failure_rate, base.replicas, hedge, timeout)


def _head(a, cb):
    return HeadIndex.build(read_vectors(a.head_file), cb, seed=0)


def cmd_serve_orchestrator(a):
    cb = read_codebook(a.codebook)
    cfg = _transport_config(a)
    transport = TcpTransport(parse_shard_list(a.shards), cfg)
    orch = Orchestrator(transport, _head(a, cb), cb, build_sdc_table(cb))
    host, port = parse_address(a.listen)
    srv = make_server(QueryService(orch, _params(a)), host, port)
    print(f"orchestrator on {srv.server_address[0]}:{srv.server_address[1]}", flush=True)
    try:
        srv.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        srv.server_close()
        transport.close()


def cmd_query(a):
    qs = read_vectors(a.queries)
    params = _params(a)
    results, ios = [], []
    if a.orchestrator:
        with QueryClient(parse_address(a.orchestrator)) as client:
            for q in qs.data:
                res, reply = client.query(q, params)
                results.append(res)
                ios.append(reply.io_used)
    else:
        if not (a.shard_dir and a.head_file and a.codebook):
            raise SystemExit("query needs --orchestrator, or --shard-dir with --head-file and --codebook")
        cb = read_codebook(a.codebook)
        table = build_sdc_table(cb)
        shards = ShardSet([read_shard(p, table) for p in sorted(Path(a.shard_dir).glob("shard-*.nod"))], table)
        orch = Orchestrator(LocalTransport(shards, _transport_config(a), a.seed), _head(a, cb), cb, table)
        for q in qs.data:
            res, st = orch.search(q, params)
            results.append(res)
            ios.append(st.io_used)
    out = sys.stdout if not a.out else open(a.out, "w")
    for i, res in enumerate(results):
        out.write(f"query={i} io_used={ios[i]} ids={','.join(str(r.id) for r in res)}\n")
    if out is not sys.stdout:
        out.close()
    if a.gt:
        recall = bench.recall_at_k([[r.id for r in res] for res in results],
                                   bench.read_ground_truth(a.gt), params.k)
        print(f"recall@{params.k}={recall:.4f} io_mean={np.mean(ios):.1f}")
        if a.min_recall is not None and recall < a.min_recall:
            return EXIT_THRESHOLD
    return EXIT_OK


def _report_threshold(report: bench.RunReport, min_recall) -> int:
    print(report.to_text(), end="")
    if min_recall is not None:
        worst = min(r["recall"] for r in report.rows if "recall" in r)
        if worst < min_recall:
            print(f"recall {worst:.4f} below threshold {min_recall}", file=sys.stderr)
            return EXIT_THRESHOLD
    return EXIT_OK


def cmd_sweep(a):
    spec = bench.ExperimentSpec.load(a.spec)
    if a.out:
        spec.output = a.out
    cfg = TransportConfig.load(a.transport_config) if a.transport_config else None
    return _report_threshold(bench.run_pipeline(spec, cfg), a.min_recall)


def cmd_compare(a):
    spec = bench.ExperimentSpec.load(a.spec)
    if a.out:
        spec.output = a.out
    return _report_threshold(bench.compare_partitioned(spec), a.min_recall)


def _search_flags(p):
    p.add_argument("--bw", type=int, default=32)
    p.add_argument("--hops", type=int, default=6)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--l", type=int, default=None)
    p.add_argument("--k-head", type=int, default=32)
    p.add_argument("--hedge-ms", type=float, default=None)
    p.add_argument("--timeout-ms", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="distann", description="Distributed graph ANN at desk scale.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--distribution", default="clustered-gaussian", choices=bench.DISTRIBUTIONS)
    p.add_argument("--blobs", type=int, default=10)
    p.add_argument("--spread", type=float, default=0.5)
    p.add_argument("--queries", type=int, default=0)
    p.add_argument("--queries-out")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("gt", help="brute-force ground truth")
    p.add_argument("--base", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gt)

    p = sub.add_parser("cluster", help="k-means partitioning with closure assignment")
    p.add_argument("--base", required=True)
    p.add_argument("--P", type=int, default=8)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--max-assign", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_cluster)

    p = sub.add_parser("build", help="build one graph per partition")
    p.add_argument("--base", required=True)
    p.add_argument("--partitions", required=True)
    p.add_argument("--R", type=int, default=32)
    p.add_argument("--L", type=int, default=None)
    p.add_argument("--alpha", type=float, default=1.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_build)

    p = sub.add_parser("stitch", help="union partition graphs into one graph")
    p.add_argument("--base", required=True)
    p.add_argument("--partitions", required=True)
    p.add_argument("--graphs", required=True)
    p.add_argument("--R-serve", type=int, default=24)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_stitch)

    p = sub.add_parser("head", help="collect head vectors from partition graph top layers")
    p.add_argument("--base", required=True)
    p.add_argument("--partitions", required=True)
    p.add_argument("--graphs", required=True)
    p.add_argument("--stitched", required=True)
    p.add_argument("--fraction", type=float, default=0.05)
    p.add_argument("--count", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_head)

    p = sub.add_parser("encode", help="train PQ codebooks and encode the corpus")
    p.add_argument("--base", required=True)
    p.add_argument("--M", type=int, default=16)
    p.add_argument("--sample", type=int, default=20000)
    p.add_argument("--iters", type=int, default=15)
    p.add_argument("--opq-iters", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--codebook-out", required=True)
    p.add_argument("--codes-out", required=True)
    p.set_defaults(fn=cmd_encode)

    p = sub.add_parser("load", help="pack nodes into shard files")
    p.add_argument("--base", required=True)
    p.add_argument("--stitched", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--codes", required=True)
    p.add_argument("--num-shards", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_load)

    p = sub.add_parser("serve-shard", help="serve one shard file over TCP")
    p.add_argument("--shard-file", required=True)
    p.add_argument("--codebook", required=True, help="codebook used to build the SDC table")
    p.add_argument("--listen", default="127.0.0.1:0")
    p.add_argument("--failure-rate", type=float, default=0.0)
    p.add_argument("--latency-ms", type=float, default=0.0)
    p.add_argument("--jitter-ms", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_serve_shard)

    p = sub.add_parser("serve-orchestrator", help="serve queries over TCP against shard servers")
    p.add_argument("--shards", required=True, help="comma-separated shards, '|' between replicas")
    p.add_argument("--head-file", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--listen", default="127.0.0.1:0")
    p.add_argument("--transport-config")
    _search_flags(p)
    p.set_defaults(fn=cmd_serve_orchestrator)

    p = sub.add_parser("query", help="run queries via an orchestrator or in-process")
    p.add_argument("--queries", required=True)
    p.add_argument("--orchestrator", help="host:port of a running orchestrator")
    p.add_argument("--shard-dir")
    p.add_argument("--head-file")
    p.add_argument("--codebook")
    p.add_argument("--transport-config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gt")
    p.add_argument("--min-recall", type=float)
    p.add_argument("--out")
    _search_flags(p)
    p.set_defaults(fn=cmd_query)

    for name, fn, text in (("sweep", cmd_sweep, "run the full pipeline and search grid"),
                           ("compare", cmd_compare, "distributed vs clustered-partitioned baseline")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--spec", required=True)
        p.add_argument("--transport-config")
        p.add_argument("--out")
        p.add_argument("--min-recall", type=float)
        p.set_defaults(fn=fn)

    p = sub.add_parser("inject", help="write a transport config with failure/latency settings")
    p.add_argument("--out", required=True)
    p.add_argument("--failure-rate", type=float, default=0.0)
    p.add_argument("--latency-ms", type=float, default=0.0)
    p.add_argument("--jitter-ms", type=float, default=0.0)
    p.add_argument("--replicas", type=int, default=1)
    p.add_argument("--hedge-ms", type=float, default=None)
    p.add_argument("--timeout-ms", type=float, default=None)
    p.set_defaults(fn=cmd_inject)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.fn(args)
    except SystemExit as exc:
        if isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
            return EXIT_USAGE
        raise
    except bench.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
