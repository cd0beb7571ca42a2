import re
import subprocess
import sys

import numpy as np
import pytest

from distann.bench import read_ground_truth
from distann.cli import main
from distann.transport import TransportConfig
from distann.vectors import read_vectors


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    p = lambda name: str(d / name)
    steps = [
        ["gen", "--n", "2000", "--dim", "16", "--queries", "40", "--out", p("base.vec"),
         "--queries-out", p("q.vec")],
        ["gt", "--base", p("base.vec"), "--queries", p("q.vec"), "--k", "10", "--out", p("gt.bin")],
        ["cluster", "--base", p("base.vec"), "--P", "3", "--out", p("parts")],
        ["build", "--base", p("base.vec"), "--partitions", p("parts"), "--R", "16", "--out", p("graphs")],
        ["stitch", "--base", p("base.vec"), "--partitions", p("parts"), "--graphs", p("graphs"),
         "--R-serve", "12", "--out", p("stitched.grf")],
        ["head", "--base", p("base.vec"), "--partitions", p("parts"), "--graphs", p("graphs"),
         "--stitched", p("stitched.grf"), "--out", p("head.vec")],
        ["encode", "--base", p("base.vec"), "--M", "4", "--iters", "4", "--codebook-out", p("cb.pq"),
         "--codes-out", p("codes.bin")],
        ["load", "--base", p("base.vec"), "--stitched", p("stitched.grf"), "--codebook", p("cb.pq"),
         "--codes", p("codes.bin"), "--num-shards", "2", "--out", p("shards")],
    ]
    for argv in steps:
        assert main(argv) == 0, argv
    return d


def test_pipeline_artifacts(pipeline):
    assert read_vectors(pipeline / "base.vec").count == 2000
    assert read_ground_truth(pipeline / "gt.bin").ids.shape == (40, 10)
    assert len(list((pipeline / "graphs").glob("part-*.grf"))) == 3
    assert sorted(x.name for x in (pipeline / "shards").iterdir()) == ["shard-0000.nod", "shard-0001.nod"]
    assert read_vectors(pipeline / "head.vec").count == 100


def _query_args(d, *extra):
    return ["query", "--queries", str(d / "q.vec"), "--shard-dir", str(d / "shards"),
            "--head-file", str(d / "head.vec"), "--codebook", str(d / "cb.pq"),
            "--gt", str(d / "gt.bin"), *extra]


def test_query_in_process_and_threshold(pipeline, capsys):
    assert main(_query_args(pipeline, "--out", str(pipeline / "res.txt"))) == 0
    recall = float(re.search(r"recall@10=([\d.]+)", capsys.readouterr().out).group(1))
    assert recall > 0.8
    lines = (pipeline / "res.txt").read_text().splitlines()
    assert len(lines) == 40 and lines[0].startswith("query=0 io_used=")
    assert main(_query_args(pipeline, "--min-recall", "1.01")) == 3


def test_inject_and_failing_transport(pipeline, capsys):
    cfg = pipeline / "t.cfg"
    assert main(["inject", "--out", str(cfg), "--failure-rate", "0.05", "--replicas", "2"]) == 0
    assert TransportConfig.load(cfg) == TransportConfig(failure_rate=0.05, replicas=2)
    capsys.readouterr()
    assert main(_query_args(pipeline, "--transport-config", str(cfg))) == 0
    assert "recall@10=" in capsys.readouterr().out


def test_usage_and_stage_errors(pipeline, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--n", "x", "--dim", "2", "--out", "o"])
    assert exc.value.code == 1
    assert main(["query", "--queries", str(pipeline / "q.vec")]) == 1
    assert main(["gt", "--base", str(tmp_path / "missing.vec"), "--queries", "q", "--out", "o"]) == 2
    (tmp_path / "bad.vec").write_bytes(b"garbage")
    assert main(["cluster", "--base", str(tmp_path / "bad.vec"), "--out", str(tmp_path / "p")]) == 2


def test_sweep_and_compare(tmp_path, capsys):
    spec = tmp_path / "spec.txt"
    spec.write_text("n=800\ndim=8\nqueries=20\nP=2\nR=12\nR_serve=10\nM=4\nnum_shards=2\n"
                    "H_values=2,4\nBW_values=8\nL=32\nk_head=8\nN_values=1,2\nM_values=16\n")
    assert main(["sweep", "--spec", str(spec), "--out", str(tmp_path / "r.txt")]) == 0
    assert "mode=distributed H=2" in (tmp_path / "r.txt").read_text()
    assert main(["compare", "--spec", str(spec), "--min-recall", "1.01"]) == 3
    assert "mode=partitioned N=2" in capsys.readouterr().out


def _spawn(argv):
    proc = subprocess.Popen([sys.executable, "-m", "distann.cli", *argv], stdout=subprocess.PIPE,
                            stderr=subprocess.PIPE, text=True)
    line = proc.stdout.readline()
    m = re.search(r"on ([\d.]+:\d+)", line)
    assert m, line + proc.stderr.read()
    return proc, m.group(1)


def test_tcp_serving_matches_in_process(pipeline, capsys):
    procs = []
    try:
        addrs = []
        for s in range(2):
            proc, addr = _spawn(["serve-shard", "--shard-file", str(pipeline / "shards" / f"shard-{s:04d}.nod"),
                                 "--codebook", str(pipeline / "cb.pq")])
            procs.append(proc)
            addrs.append(addr)
        proc, orch = _spawn(["serve-orchestrator", "--shards", ",".join(addrs), "--head-file",
                             str(pipeline / "head.vec"), "--codebook", str(pipeline / "cb.pq")])
        procs.append(proc)
        assert main(["query", "--queries", str(pipeline / "q.vec"), "--orchestrator", orch,
                     "--out", str(pipeline / "tcp.txt")]) == 0
        assert main(_query_args(pipeline, "--out", str(pipeline / "local.txt"))) == 0
        assert (pipeline / "tcp.txt").read_text() == (pipeline / "local.txt").read_text()
    finally:
        for proc in procs:
            proc.terminate()
            proc.wait(timeout=10)
