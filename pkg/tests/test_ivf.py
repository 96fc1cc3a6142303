import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from shitu.core import BadNprobe, DuplicateId, NotTrained, TooFewSamples, UnsupportedMetric
from shitu.index import FlatIndex, IvfIndex, default_nlist, kmeans

from oracles import naive_distances


def _gallery(rng, n=1000, dim=16):
    return rng.standard_normal((n, dim)).astype(np.float32)


def _ivf(rows, metric="l2", nlist=16, seed=0, ids=None):
    idx = IvfIndex(rows.shape[1], metric, nlist=nlist, seed=seed)
    idx.train(rows)
    ids = np.arange(len(rows)) if ids is None else ids
    idx.add_arrays(ids, rows, [f"l{i}" for i in ids])
    return idx


def test_k_equals_n_gives_points():
    pts = np.array([[0, 0], [5, 1], [-3, 4], [2, -7]], np.float32)
    res = kmeans(pts, 4, seed=3)
    got = sorted(map(tuple, res.centroids.tolist()))
    assert got == sorted(map(tuple, pts.astype(np.float64).tolist()))
    assert res.inertia_history[-1] == 0.0


def test_separated_clusters_recovered(rng):
    centers = np.array([[10, 10], [10, -10], [-10, 10], [-10, -10]], np.float64)
    labels = np.repeat(np.arange(4), 200)
    x = centers[labels] + rng.normal(0, 0.5, size=(800, 2))
    res = kmeans(x, 4, seed=0)
    means = np.array([x[labels == c].mean(axis=0) for c in range(4)])
    for m in means:
        assert np.min(np.linalg.norm(res.centroids - m, axis=1)) < 0.1


def test_kmeans_deterministic(rng):
    x = _gallery(rng, 500, 8)
    a = kmeans(x, 10, seed=7)
    b = kmeans(x, 10, seed=7)
    assert a.centroids.tobytes() == b.centroids.tobytes()
    assert not np.array_equal(a.centroids, kmeans(x, 10, seed=8).centroids)


@given(st.integers(0, 2**32 - 1), st.booleans())
def test_inertia_non_increasing(seed, spherical):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((120, 4)) * rng.uniform(0.1, 3, size=4)
    hist = kmeans(x, 8, seed=seed % 100, spherical=spherical).inertia_history
    assert all(b <= a * (1 + 1e-12) + 1e-12 for a, b in zip(hist, hist[1:]))


def test_no_empty_cells_with_duplicates():
    # many duplicate points push k-means++ into degenerate picks
    x = np.repeat(np.array([[0.0, 0.0], [1.0, 1.0], [5.0, 5.0]]), 30, axis=0)
    x = np.vstack([x, [[9.0, 9.0], [9.5, 9.0]]])
    res = kmeans(x, 5, seed=0)
    assert len(np.unique(res.assignment)) == 5


def test_too_few_samples():
    with pytest.raises(TooFewSamples):
        IvfIndex(2, nlist=10).train(np.ones((5, 2)))


def test_hamming_rejected():
    with pytest.raises(UnsupportedMetric):
        IvfIndex(64, "hamming")


def test_default_nlist():
    assert default_nlist(10_000) == 100
    assert default_nlist(1) == 1
    idx = IvfIndex(4)
    idx.train(np.random.default_rng(0).standard_normal((400, 4)))
    assert idx.nlist == 20


def test_untrained_errors():
    idx = IvfIndex(4)
    with pytest.raises(NotTrained):
        idx.add_arrays([0], np.ones((1, 4)), ["a"])
    with pytest.raises(NotTrained):
        idx.search(np.ones(4), 1)


def test_bad_nprobe(rng):
    idx = _ivf(_gallery(rng, 200, 4), nlist=8)
    for bad in (0, 9):
        with pytest.raises(BadNprobe):
            idx.search(np.ones(4), 1, nprobe=bad)


def test_records_live_in_nearest_cell(rng):
    rows = _gallery(rng)
    idx = _ivf(rows)
    cents = idx.centroids
    for i in range(0, 1000, 37):
        d = ((cents - rows[i].astype(np.float64)) ** 2).sum(axis=1)
        assert idx.cell_of(i) == int(np.argmin(d))
        assert i in idx.cell_members(idx.cell_of(i)).tolist()


def test_add_delete_conservation(rng):
    rows = _gallery(rng)
    idx = _ivf(rows)
    assert sum(idx.cell_sizes()) == 1000
    gone = rng.choice(1000, 500, replace=False)
    assert idx.delete(gone) == 500
    assert sum(idx.cell_sizes()) == 500 == len(idx)
    q = rows[gone[0]]
    assert gone[0] not in [r.id for r in idx.search(q, 50, nprobe=16)]


def test_add_then_delete_same_id(rng):
    rows = _gallery(rng, 100, 4)
    idx = _ivf(rows, nlist=4)
    idx.add_arrays([777], rows[:1] + 0.01, ["new"])
    with pytest.raises(DuplicateId):
        idx.add_arrays([777], rows[:1], ["again"])
    idx.delete([777])
    assert 777 not in [r.id for r in idx.search(rows[0], 100, nprobe=4)]


@given(st.integers(0, 2**32 - 1))
def test_random_add_delete_sequence(seed):
    rng = np.random.default_rng(seed)
    rows = rng.standard_normal((300, 3)).astype(np.float32)
    idx = IvfIndex(3, nlist=6, seed=1)
    idx.train(rows)
    live: set[int] = set()
    next_id = 0
    for _ in range(8):
        if rng.random() < 0.6:
            m = int(rng.integers(1, 40))
            ids = np.arange(next_id, next_id + m)
            idx.add_arrays(ids, rows[ids % 300], ["x"] * m)
            live.update(ids.tolist())
            next_id += m
        elif live:
            drop = rng.choice(sorted(live), size=min(len(live), int(rng.integers(1, 20))), replace=False)
            idx.delete(drop.tolist() + [10**9])
            live.difference_update(drop.tolist())
        assert sum(idx.cell_sizes()) == len(live) == len(idx)


@pytest.mark.parametrize("metric", ["l2", "ip", "cosine"])
def test_full_probe_equals_flat(metric, rng):
    rows = _gallery(rng, 2000, 16)
    ivf = _ivf(rows, metric, nlist=20)
    flat = FlatIndex(16, metric)
    flat.add_arrays(np.arange(2000), rows, [f"l{i}" for i in range(2000)])
    for _ in range(30):
        q = rng.standard_normal(16).astype(np.float32)
        assert ivf.search(q, 10, nprobe=20) == flat.search(q, 10)


def test_nprobe_one_membership(rng):
    rows = _gallery(rng)
    idx = _ivf(rows)
    for i in range(0, 1000, 50):
        probed = idx.probe_cells(rows[i], 1)[0]
        top = idx.search(rows[i], 1, nprobe=1)[0]
        if idx.cell_of(i) == probed:
            assert top.id == i and top.distance == 0.0
        else:
            assert top.id != i


def test_recall_non_decreasing_in_nprobe(rng):
    rows = _gallery(rng, 3000, 16)
    idx = _ivf(rows, nlist=25)
    queries = rng.standard_normal((60, 16)).astype(np.float32)
    truth = [int(np.argmin(naive_distances(rows, q, "l2"))) for q in queries]
    recalls = []
    for nprobe in range(1, 26):
        hits = sum(idx.search(q, 1, nprobe=nprobe)[0].id == t for q, t in zip(queries, truth))
        recalls.append(hits / len(queries))
    assert all(b >= a for a, b in zip(recalls, recalls[1:]))
    assert recalls[-1] == 1.0
