import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from shitu.evaluation import LatencyStats, index_recall, label_recall, neighbor_recall, run_bench, time_searches
from shitu.index import FlatIndex


def test_label_recall_examples():
    assert label_recall([], [], 1) == 0.0
    retrieved = [["a", "b"], ["c", "b"], ["c", "c"]]
    assert label_recall(["a", "b", "b"], retrieved, 1) == pytest.approx(1 / 3)
    assert label_recall(["a", "b", "b"], retrieved, 2) == pytest.approx(2 / 3)


@given(st.lists(st.lists(st.sampled_from("abc"), min_size=5, max_size=5), min_size=1, max_size=20), st.data())
def test_label_recall_non_decreasing_in_k(retrieved, data):
    queries = data.draw(st.lists(st.sampled_from("abc"), min_size=len(retrieved), max_size=len(retrieved)))
    vals = [label_recall(queries, retrieved, k) for k in range(1, 6)]
    assert vals == sorted(vals) and 0.0 <= vals[0] and vals[-1] <= 1.0


def test_neighbor_recall():
    assert neighbor_recall([[1, 2, 3]], [[3, 2, 9]], 3) == pytest.approx(2 / 3)
    assert neighbor_recall([[1, 2]], [[1, 2]], 2) == 1.0
    assert neighbor_recall([], [], 5) == 0.0


def test_index_recall_self_queries(rng):
    x = rng.standard_normal((50, 4)).astype(np.float32)
    idx = FlatIndex(4)
    idx.add_arrays(np.arange(50), x, [f"l{i}" for i in range(50)])
    rec = index_recall(idx, x, [f"l{i}" for i in range(50)], 3)
    assert rec == {1: 1.0, 2: 1.0, 3: 1.0}


def test_latency_stats_order_statistics():
    stats = LatencyStats.from_seconds([0.003, 0.001, 0.002])
    assert stats.samples_ms == pytest.approx([3.0, 1.0, 2.0])
    assert stats.mean_ms == pytest.approx(2.0) and stats.p50_ms == pytest.approx(2.0)
    assert stats.p50_ms <= stats.p99_ms <= 3.0


def test_time_searches_repeat_count(rng):
    idx = FlatIndex(4)
    idx.add_arrays(np.arange(10), rng.standard_normal((10, 4)).astype(np.float32), ["x"] * 10)
    stats = time_searches(idx, rng.standard_normal((3, 4)).astype(np.float32), 2, repeats=6)
    assert len(stats.samples_ms) == 6 and all(s >= 0 for s in stats.samples_ms)


def test_run_bench_payload_bytes():
    fl = run_bench(200, 64, payload="float", n_queries=2, repeats=2)
    bi = run_bench(200, 64, payload="binary", n_queries=2, repeats=2)
    assert fl.payload_bytes == 200 * 64 * 4 and bi.payload_bytes == 200 * 8
    with pytest.raises(ValueError):
        run_bench(10, 8, payload="half")
    with pytest.raises(ValueError):
        run_bench(10, 8, index="lsh")
