from collections import deque

import numpy as np
import pytest

from shitu.core import DuplicateId, EfTooSmall, UnsupportedOperation
from shitu.index import FlatIndex, HnswIndex

from oracles import naive_distances


def _hnsw(rows, metric="l2", M=16, ef_construction=100, seed=0, **kw):
    dim = rows.shape[1] * (8 if metric == "hamming" else 1)
    idx = HnswIndex(dim, metric, M=M, ef_construction=ef_construction, seed=seed, **kw)
    idx.add_arrays(np.arange(len(rows)), rows, [f"l{i}" for i in range(len(rows))])
    return idx


def reachable_at_layer0(idx: HnswIndex) -> int:
    seen = {idx.entry_point}
    todo = deque([idx.entry_point])
    while todo:
        node = todo.popleft()
        for nb in idx.neighbors(node, 0).tolist():
            if nb not in seen:
                seen.add(nb)
                todo.append(nb)
    return len(seen)


def check_structure(idx: HnswIndex) -> None:
    levels = idx.levels
    assert levels[idx.entry_point] == levels.max() == idx.max_level
    for node in range(idx.node_count):
        for lvl in range(idx.max_level + 1):
            nbs = idx.neighbors(node, lvl)
            cap = idx.M0 if lvl == 0 else idx.M
            assert len(nbs) <= cap
            if lvl > levels[node]:
                assert len(nbs) == 0
            else:
                assert np.all(levels[nbs] >= lvl)
                assert node not in nbs.tolist()
                assert len(set(nbs.tolist())) == len(nbs)


@pytest.fixture(scope="module")
def gauss5000():
    rows = np.random.default_rng(5).standard_normal((5000, 32)).astype(np.float32)
    return rows, _hnsw(rows, M=32, ef_construction=200)


def test_first_element_becomes_entry():
    idx = _hnsw(np.ones((1, 4), np.float32))
    assert idx.entry_point == 0
    assert idx.max_level == idx.levels[0]
    check_structure(idx)
    assert idx.search(np.zeros(4), 3)[0].id == 0


def test_level_distribution_matches_geometric():
    idx = HnswIndex(4, M=16, seed=1)
    levels = np.array([idx.draw_level() for _ in range(200_000)])
    p_up = 1 / 16
    for lvl in range(3):
        frac = np.mean(levels > lvl)
        np.testing.assert_allclose(frac, p_up ** (lvl + 1), rtol=0.1)


def test_same_seed_identical_graph(rng):
    rows = rng.standard_normal((600, 8)).astype(np.float32)
    a, b = _hnsw(rows, seed=4), _hnsw(rows, seed=4)
    assert a._links.tobytes() == b._links.tobytes()
    assert a._counts.tobytes() == b._counts.tobytes()
    assert np.array_equal(a.levels, b.levels) and a.entry_point == b.entry_point
    q = rng.standard_normal(8)
    assert a.search(q, 10) == b.search(q, 10)


def test_incremental_batches_keep_invariants(rng):
    rows = rng.standard_normal((600, 8)).astype(np.float32)
    first, second = HnswIndex(8, M=4, ef_construction=20, seed=2), HnswIndex(8, M=4, ef_construction=20, seed=2)
    for idx in (first, second):
        for lo in range(0, 600, 70):
            ids = np.arange(lo, min(lo + 70, 600))
            idx.add_arrays(ids, rows[ids], [f"l{i}" for i in ids])
            check_structure(idx)
            assert reachable_at_layer0(idx) == idx.node_count
    assert first._links.tobytes() == second._links.tobytes()


@pytest.mark.parametrize("M,dim", [(4, 4), (8, 12), (8, 128), (16, 4)])
def test_layer0_connected_at_small_M(M, dim):
    rows = np.random.default_rng(M * dim).standard_normal((2000, dim)).astype(np.float32)
    idx = _hnsw(rows, M=M, ef_construction=40)
    check_structure(idx)
    assert reachable_at_layer0(idx) == 2000


def test_connectivity_and_degrees_5000(gauss5000):
    _, idx = gauss5000
    check_structure(idx)
    assert reachable_at_layer0(idx) == 5000


def test_exhaustive_ef_gives_exact_recall(rng):
    rows = rng.standard_normal((1500, 12)).astype(np.float32)
    idx = _hnsw(rows, M=8, ef_construction=64)
    flat = FlatIndex(12)
    flat.add_arrays(np.arange(1500), rows, [f"l{i}" for i in range(1500)])
    for _ in range(20):
        q = rng.standard_normal(12)
        assert [r.id for r in idx.search(q, 10, ef_search=1500)] == [r.id for r in flat.search(q, 10)]


def test_stored_vector_found_at_rank_one():
    rng = np.random.default_rng(11)
    rows = rng.standard_normal((10_000, 32)).astype(np.float32)
    idx = _hnsw(rows, M=32, ef_construction=200, ef_search=64)
    picks = rng.choice(10_000, 100, replace=False)
    hits = sum(idx.search(rows[i], 1)[0].id == i for i in picks)
    assert hits >= 99


def test_recall_non_decreasing_in_ef(gauss5000):
    rows, idx = gauss5000
    queries = np.random.default_rng(9).standard_normal((50, 32)).astype(np.float32)
    truth = [set(np.argsort(naive_distances(rows, q, "l2"), kind="stable")[:10].tolist()) for q in queries]
    recalls = []
    for ef in (16, 32, 64, 128, 256):
        got = [{r.id for r in idx.search(q, 10, ef_search=ef)} for q in queries]
        recalls.append(np.mean([len(g & t) / 10 for g, t in zip(got, truth)]))
    assert all(b >= a for a, b in zip(recalls, recalls[1:]))


def test_ef_too_small(rng):
    idx = _hnsw(rng.standard_normal((50, 4)).astype(np.float32))
    with pytest.raises(EfTooSmall):
        idx.search(np.ones(4), 10, ef_search=5)


def test_delete_rejected(rng):
    with pytest.raises(UnsupportedOperation):
        HnswIndex(4).delete([0])
    idx = _hnsw(rng.standard_normal((20, 4)).astype(np.float32))
    with pytest.raises(UnsupportedOperation) as err:
        idx.delete([3])
    assert err.value.op == "hnsw.delete"
    assert len(idx) == 20 and 3 in idx


def test_duplicate_id(rng):
    idx = _hnsw(rng.standard_normal((5, 4)).astype(np.float32))
    with pytest.raises(DuplicateId):
        idx.add_arrays([2], np.ones((1, 4)), ["x"])


@pytest.mark.parametrize("metric", ["ip", "cosine", "hamming"])
def test_other_metrics_match_flat_when_exhaustive(metric, rng):
    if metric == "hamming":
        rows = rng.integers(0, 256, size=(400, 8), dtype=np.uint8)
        q = rng.integers(0, 256, size=8, dtype=np.uint8)
    else:
        rows = rng.standard_normal((400, 8)).astype(np.float32)
        q = rng.standard_normal(8).astype(np.float32)
    idx = _hnsw(rows, metric, M=8, ef_construction=64)
    dim = 64 if metric == "hamming" else 8
    flat = FlatIndex(dim, metric)
    flat.add_arrays(np.arange(400), rows, [f"l{i}" for i in range(400)])
    got = idx.search(q, 5, ef_search=400)
    want = flat.search(q, 5)
    assert [r.id for r in got] == [r.id for r in want]
    np.testing.assert_allclose([r.distance for r in got], [r.distance for r in want], rtol=1e-6, atol=1e-6)
