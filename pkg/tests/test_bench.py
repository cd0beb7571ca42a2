import numpy as np
import pytest

from distann.bench import (ExperimentSpec, GroundTruth, RunReport, StageError, build_index,
                           compute_ground_truth, format_row, gen_dataset, gen_queries, parse_row,
                           partitioned_search, partitioned_sweep, read_ground_truth, recall_at_k,
                           run_pipeline, write_ground_truth)
from distann.errors import BadMagicError, TruncatedError
from distann.partition import cluster_assign
from distann.vectors import VectorDataset, brute_force_topk


def test_gen_deterministic_and_distinct_streams():
    a = gen_dataset(500, 8, seed=3)
    b = gen_dataset(500, 8, seed=3)
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, gen_dataset(500, 8, seed=4).data)
    q = gen_queries(500, 8, seed=3)
    assert not np.array_equal(a.data[:10], q.data[:10])
    assert gen_dataset(1, 3).count == 1
    for dist in ("gaussian", "uniform"):
        assert gen_dataset(20, 4, distribution=dist).data.dtype == np.float32
    with pytest.raises(ValueError):
        gen_dataset(10, 4, distribution="cauchy")
    with pytest.raises(ValueError):
        gen_dataset(0, 4)


def test_queries_share_blob_centers():
    ds, dl = gen_dataset(4000, 16, seed=1, spread=4.0, return_labels=True)
    qs, ql = gen_queries(400, 16, seed=1, spread=4.0, return_labels=True)
    for g in range(10):
        a, b = ds.data[dl == g].mean(0), qs.data[ql == g].mean(0)
        assert np.linalg.norm(a - b) < 1.0


def test_cluster_purity_on_separated_blobs():
    ds, labels = gen_dataset(5000, 16, seed=2, spread=4.0, return_labels=True)
    pa = cluster_assign(ds, 10, epsilon=0.0)
    top = pa.labels[:, 0]
    hits = sum(np.bincount(labels[top == c]).max() for c in np.unique(top))
    assert hits / ds.count > 0.9


def test_ground_truth_brute_force():
    ds = gen_dataset(700, 6, seed=5)
    qs = VectorDataset(np.concatenate([ds.data[[3, 9]], gen_queries(5, 6, seed=5).data]))
    gt = compute_ground_truth(ds, qs, 10)
    assert gt.ids[0, 0] == 3 and gt.dists[0, 0] == 0.0 and gt.ids[1, 0] == 9
    for i in range(qs.count):
        assert gt.ids[i].tolist() == [r.id for r in brute_force_topk(ds, qs.data[i], 10)]
    with pytest.raises(ValueError):
        compute_ground_truth(ds, qs, 701)


def test_ground_truth_ties_by_id():
    ds = VectorDataset(np.array([[1.0], [-1.0], [1.0], [0.0]], np.float32))
    gt = compute_ground_truth(ds, VectorDataset(np.zeros((1, 1), np.float32)), 3)
    assert gt.ids[0].tolist() == [3, 0, 1]


def test_ground_truth_file(tmp_path):
    gt = GroundTruth(np.arange(6, dtype=np.uint64).reshape(2, 3), np.ones((2, 3), np.float32))
    write_ground_truth(tmp_path / "g", gt)
    back = read_ground_truth(tmp_path / "g")
    assert np.array_equal(back.ids, gt.ids) and np.array_equal(back.dists, gt.dists)
    raw = (tmp_path / "g").read_bytes()
    (tmp_path / "b").write_bytes(b"Y" + raw[1:])
    with pytest.raises(BadMagicError):
        read_ground_truth(tmp_path / "b")
    (tmp_path / "c").write_bytes(raw[:-1])
    with pytest.raises(TruncatedError):
        read_ground_truth(tmp_path / "c")


def test_recall_cases():
    gt = np.array([[1, 2], [3, 4]], dtype=np.uint64)
    assert recall_at_k([[1, 2], [4, 3]], gt, 2) == 1.0
    assert recall_at_k([[7, 8], [9, 0]], gt, 2) == 0.0
    assert recall_at_k([[1, 9], [3]], gt, 2) == 0.5
    assert recall_at_k([[2, 1, 5]], gt[:1], 1) == 0.0
    with pytest.raises(ValueError):
        recall_at_k([[1]], gt, 2)
    with pytest.raises(ValueError):
        recall_at_k([[1]], gt, 3)


def test_spec_round_trip(tmp_path):
    spec = ExperimentSpec(n=2000, H_values=[4, 6], failure_rates=[0.0, 0.02], output="x.txt")
    (tmp_path / "s").write_text(spec.to_text())
    assert ExperimentSpec.load(tmp_path / "s") == spec
    text = "n=300  # corpus\nBW_values=8,16\n\n"
    assert ExperimentSpec.from_text(text).BW_values == [8, 16]
    for bad in ("nonsense", "zzz=1", "H_values="):
        with pytest.raises(ValueError):
            ExperimentSpec.from_text(bad)


def test_report_round_trip():
    rep = RunReport()
    rep.add(mode="distributed", H=4, recall=0.912345678)
    rep.add(mode="partitioned", N=2, recall=0.5)
    back = RunReport.from_text(rep.to_text())
    assert back.rows[0] == {"mode": "distributed", "H": 4, "recall": 0.912346}
    assert back.select(mode="partitioned") == [{"mode": "partitioned", "N": 2, "recall": 0.5}]
    assert parse_row(format_row({"a": 1, "b": "x"})) == {"a": 1, "b": "x"}


@pytest.fixture(scope="module")
def small():
    spec = ExperimentSpec(n=1000, dim=16, queries=30, P=3, R=12, R_serve=10, M=4, num_shards=2,
                          H_values=[2, 4], BW_values=[8], L=32, k_head=8)
    return spec, run_pipeline(spec)


def test_pipeline_report(small):
    spec, rep = small
    stages = {r["stage"] for r in rep.select(mode="stage")}
    assert {"gen", "gt", "cluster", "build", "stitch", "head", "encode", "load", "sweep"} <= stages
    rows = rep.select(mode="distributed")
    assert [r["H"] for r in rows] == [2, 4]
    for r in rows:
        assert 0 <= r["recall"] <= 1 and r["io_max"] <= r["io_bound"]
    assert rows[1]["recall"] >= rows[0]["recall"]


def test_pipeline_deterministic(small):
    spec, rep = small
    again = run_pipeline(spec)
    strip = lambda rows: [{k: v for k, v in r.items() if "latency" not in k} for r in rows]
    assert strip(again.select(mode="distributed")) == strip(rep.select(mode="distributed"))


def test_partitioned_baseline():
    ds = gen_dataset(1500, 8, seed=6)
    qs = gen_queries(20, 8, seed=6)
    gt = compute_ground_truth(ds, qs, 5)
    idx = build_index(ds, P=3, R=12, R_serve=10, M=4, num_shards=2, pq_sample=1500)
    ids, io = partitioned_search(idx, qs.data[0], 2, 16, 5)
    assert len(ids) == 5 and io <= 2 * 16
    full, _ = partitioned_search(idx, qs.data[0], 3, 10_000, 5)
    assert full == gt.ids[0].tolist()
    rep = partitioned_sweep(idx, qs, gt, [1, 3], [8, 64], 5)
    rows = {(r["N"], r["M"]): r for r in rep.rows}
    assert rows[(3, 64)]["recall"] >= rows[(1, 8)]["recall"]
    assert all(r["io_mean"] <= r["io_budget"] for r in rep.rows)
    with pytest.raises(ValueError):
        partitioned_search(idx, qs.data[0], 4, 8, 5)


def test_stage_error_names_stage():
    ds = gen_dataset(20, 4)
    with pytest.raises(StageError) as exc:
        build_index(ds, P=50)
    assert exc.value.stage == "cluster"
