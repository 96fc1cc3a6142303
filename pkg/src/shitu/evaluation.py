"""Recall@k evaluation and search-latency benchmarking."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Index, MetricKind
from .index import FlatIndex, HnswIndex, IvfIndex
from .metrics import binarize_matrix

WARMUP_ITERS = 3


def label_recall(query_labels: Sequence[str], retrieved: Sequence[Sequence[str]], k: int) -> float:
    """Fraction of queries whose top-k retrieved labels contain the query's own label."""
    if not query_labels:
        return 0.0
    hits = sum(1 for q, got in zip(query_labels, retrieved) if q in got[:k])
    return hits / len(query_labels)


def index_recall(index: Index, queries, query_labels: Sequence[str], k_max: int, **params) -> dict[int, float]:
    """recall@1..k_max of ``index`` for labelled queries."""
    retrieved = [[r.label for r in index.search(q, k_max, **params)] for q in queries]
    return {k: label_recall(list(query_labels), retrieved, k) for k in range(1, k_max + 1)}


def neighbor_recall(approx_ids: Sequence[Sequence[int]], exact_ids: Sequence[Sequence[int]], k: int) -> float:
    """Mean overlap of approximate and exact top-k id lists (ANN recall@k)."""
    if not exact_ids:
        return 0.0
    total = 0.0
    for a, e in zip(approx_ids, exact_ids):
        truth = set(list(e)[:k])
        total += len(truth.intersection(list(a)[:k])) / len(truth) if truth else 0.0
    return total / len(exact_ids)


@dataclass
class LatencyStats:
    mean_ms: float
    p50_ms: float
    p99_ms: float
    samples_ms: list[float]

    @classmethod
    def from_seconds(cls, samples: Sequence[float]) -> "LatencyStats":
        ms = np.asarray(samples, dtype=np.float64) * 1e3
        return cls(float(ms.mean()), float(np.percentile(ms, 50)), float(np.percentile(ms, 99)), ms.tolist())


def time_searches(index: Index, queries, k: int, repeats: int, **params) -> LatencyStats:
    """Per-repeat wall time of searching every query once (monotonic clock).

    ``WARMUP_ITERS`` untimed passes run first.
    """
    for _ in range(WARMUP_ITERS):
        for q in queries:
            index.search(q, k, **params)
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for q in queries:
            index.search(q, k, **params)
        samples.append((time.perf_counter() - t0) / max(len(queries), 1))
    return LatencyStats.from_seconds(samples)


@dataclass
class BenchReport:
    payload: str
    index: str
    gallery_size: int
    dim: int
    payload_bytes: int
    build_seconds: float
    latency: LatencyStats


def synth_gallery(gallery_size: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((gallery_size, dim), dtype=np.float32)


def run_bench(
    gallery_size: int,
    dim: int,
    payload: str = "float",
    index: str = "flat",
    n_queries: int = 10,
    repeats: int = 5,
    k: int = 10,
    seed: int = 0,
    gallery: np.ndarray | None = None,
) -> BenchReport:
    """Build an index over a seeded Gaussian gallery and time query batches.

    Float payloads use L2; binary payloads are the sign codes under Hamming.
    Queries are fresh draws from the same generator.
    """
    x = synth_gallery(gallery_size, dim, seed) if gallery is None else gallery
    rng = np.random.default_rng(seed + 1)
    qf = rng.standard_normal((n_queries, dim), dtype=np.float32)
    if payload == "binary":
        rows, queries, metric = binarize_matrix(x), binarize_matrix(qf), MetricKind.HAMMING
    elif payload == "float":
        rows, queries, metric = x, qf, MetricKind.L2
    else:
        raise ValueError(f"bench: payload must be 'float' or 'binary', got {payload!r}")
    t0 = time.perf_counter()
    if index == "flat":
        idx: Index = FlatIndex(dim, metric)
    elif index == "ivf":
        idx = IvfIndex(dim, metric, seed=seed)
        idx.train(rows)
    elif index == "hnsw":
        idx = HnswIndex(dim, metric, seed=seed)
    else:
        raise ValueError(f"bench: unknown index {index!r}")
    idx.add_arrays(np.arange(len(rows), dtype=np.uint64), rows, ["g"] * len(rows))
    build = time.perf_counter() - t0
    stats = time_searches(idx, queries, k, repeats)
    return BenchReport(payload, index, gallery_size, dim, int(rows.nbytes), build, stats)
