import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from distann.errors import BadMagicError, DimensionMismatchError, EmptyDatasetError, InvalidDimensionError, TruncatedError
from distann.vectors import (VectorDataset, brute_force_topk, decode_vectors, l2_sq, read_vectors,
                             write_vectors)

from conftest import gaussian


def test_l2_examples():
    assert l2_sq([0, 0], [0, 0]) == 0.0
    assert l2_sq([1, 2], [4, 6]) == 25.0


def test_l2_matches_scalar_loop(rng):
    a, b = rng.standard_normal((2, 64)).astype(np.float32)
    acc = 0.0
    for x, y in zip(a.tolist(), b.tolist()):
        acc += (x - y) * (x - y)
    assert l2_sq(a, b) == pytest.approx(acc, rel=1e-6)


def test_l2_dim_mismatch():
    with pytest.raises(DimensionMismatchError):
        l2_sq([1, 2], [1, 2, 3])


finite = st.floats(-1e3, 1e3, width=32)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, 8, elements=finite), arrays(np.float32, 8, elements=finite))
def test_l2_metric_props(a, b):
    assert l2_sq(a, a) == 0.0
    assert l2_sq(a, b) == l2_sq(b, a)
    assert l2_sq(a, b) >= 0.0


def test_dataset_validation():
    with pytest.raises(InvalidDimensionError):
        VectorDataset(np.zeros((3, 0)))
    with pytest.raises(ValueError):
        VectorDataset(np.zeros((2, 2)), ids=[5, 5])
    ds = VectorDataset(np.zeros((2, 3)))
    assert ds.ids.tolist() == [0, 1] and ds.dim == 3 and len(ds) == 2
    with pytest.raises(ValueError):
        ds.data[0, 0] = 1.0


def test_topk_examples():
    ds = VectorDataset(np.array([[0.0], [5.0]]))
    assert brute_force_topk(ds, [1.0], 1) == [(0, 1.0)]
    assert [r.id for r in brute_force_topk(ds, [4.0], 10)] == [1, 0]


def test_topk_ties_by_id():
    ds = VectorDataset(np.array([[1.0], [-1.0], [1.0]]), ids=[9, 3, 4])
    assert [r.id for r in brute_force_topk(ds, [0.0], 3)] == [3, 4, 9]


def test_topk_empty():
    with pytest.raises(EmptyDatasetError):
        brute_force_topk(VectorDataset(np.zeros((0, 2))), [0, 0], 1)


def test_topk_matches_full_sort():
    ds = gaussian(10_000, 32, seed=3)
    q = np.random.default_rng(4).standard_normal(32)
    got = brute_force_topk(ds, q, 100)
    d = [(float(np.sum((ds.data[i].astype(np.float64) - q.astype(np.float32)) ** 2)), i) for i in range(ds.count)]
    d.sort()
    assert [r.id for r in got] == [i for _, i in d[:100]]
    dists = [r.dist for r in got]
    assert dists == sorted(dists)


def test_file_round_trip(tmp_path):
    ds = VectorDataset(np.arange(12, dtype=np.float32).reshape(3, 4) / 7, ids=[10, 20, 30])
    write_vectors(tmp_path / "v.vec", ds)
    back = read_vectors(tmp_path / "v.vec")
    assert back.data.tobytes() == ds.data.tobytes()
    assert back.ids.tolist() == [10, 20, 30]


def test_file_errors(tmp_path):
    ds = VectorDataset(np.ones((3, 4)))
    write_vectors(tmp_path / "v.vec", ds)
    raw = (tmp_path / "v.vec").read_bytes()
    with pytest.raises(BadMagicError):
        decode_vectors(b"XXXXXXXX" + raw[8:])
    with pytest.raises(TruncatedError):
        decode_vectors(raw[:-6])
    zero_dim = raw[:8] + (0).to_bytes(4, "little") + raw[12:]
    with pytest.raises(InvalidDimensionError):
        decode_vectors(zero_dim)
    # the three failure modes are distinguishable
    assert len({BadMagicError, TruncatedError, InvalidDimensionError}) == 3


def test_header_layout(tmp_path):
    write_vectors(tmp_path / "v.vec", VectorDataset(np.ones((2, 3))))
    raw = (tmp_path / "v.vec").read_bytes()
    assert raw[:8] == b"DANNVEC1"
    assert int.from_bytes(raw[8:12], "little") == 3
    assert int.from_bytes(raw[12:20], "little") == 2
    assert raw[20] == 0 and raw[21:28] == bytes(7)
    assert len(raw) == 28 + 2 * 8 + 2 * 3 * 4
