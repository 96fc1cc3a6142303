"""Exact brute-force search (FLAT).

Also hosts the top-k selection routines reused by the IVF index, so that an IVF
probe over every cell scores pairs exactly as this index does.
"""

from __future__ import annotations

import heapq
from typing import Union

import numpy as np

from ..core import Index, MetricKind
from ..metrics import exact_to_rows, hamming_to_rows, screen_to_rows


def select_k(dists: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k smallest ``(dist, id)`` pairs, in ascending order."""
    n = dists.shape[0]
    if n > k:
        kth = np.partition(dists, k - 1)[k - 1]
        cand = np.flatnonzero(dists <= kth)
    else:
        cand = np.arange(n)
    order = np.lexsort((ids[cand], dists[cand]))
    return cand[order[:k]]


def heap_select_k(dists, ids, k: int) -> list[int]:
    """Bounded max-heap variant of :func:`select_k` (O(n log k), pure Python)."""
    heap: list[tuple[float, int, int]] = []
    for pos, (d, i) in enumerate(zip(dists, ids)):
        item = (-float(d), -int(i), pos)
        if len(heap) < k:
            heapq.heappush(heap, item)
        elif item > heap[0]:
            heapq.heapreplace(heap, item)
    return [pos for _, _, pos in sorted(heap, reverse=True)]


def topk_rows(
    rows: np.ndarray,
    ids: np.ndarray,
    q: np.ndarray,
    k: int,
    metric: MetricKind,
    sq_norms: Union[np.ndarray, None] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact top-k of ``q`` against ``rows``; returns (distances, ids)."""
    if rows.shape[0] == 0:
        return np.zeros(0), np.zeros(0, np.uint64)
    if metric is MetricKind.HAMMING:
        d = hamming_to_rows(rows, q)
        pos = select_k(d, ids, k)
        return d[pos].astype(np.float64), ids[pos]
    if rows.shape[0] <= k:
        cand = np.arange(rows.shape[0])
    else:
        if sq_norms is None:
            r64 = rows.astype(np.float64)
            sq_norms = np.einsum("ij,ij->i", r64, r64)
        scores, err = screen_to_rows(rows, sq_norms, q, metric)
        kth = np.partition(scores, k - 1)[k - 1]
        cand = np.flatnonzero(scores <= kth + 2.0 * err)
    d = exact_to_rows(rows[cand], q, metric)
    pos = select_k(d, ids[cand], k)
    return d[pos], ids[cand][pos]


class FlatIndex(Index):
    """Exhaustive index; supports every metric and deletion.

    Rows live in a contiguous buffer with a parallel id array. Deletion moves
    the last row into the freed slot, which is invisible through the contract
    because results are ordered by ``(distance, id)``.
    """

    kind = "flat"

    def __init__(self, dim: int, metric: Union[str, MetricKind] = MetricKind.L2) -> None:
        super().__init__(dim, metric)
        dtype = np.uint8 if self.metric.is_binary else np.float32
        self._rows = np.zeros((0, self.row_width), dtype=dtype)
        self._ids = np.zeros(0, dtype=np.uint64)
        self._sq = np.zeros(0, dtype=np.float64)
        self._n = 0
        self._pos: dict[int, int] = {}

    @property
    def rows(self) -> np.ndarray:
        return self._rows[: self._n]

    @property
    def row_ids(self) -> np.ndarray:
        return self._ids[: self._n]

    def _grow(self, extra: int) -> None:
        need = self._n + extra
        if need <= self._rows.shape[0]:
            return
        cap = max(need, 2 * self._rows.shape[0], 16)
        rows = np.zeros((cap, self.row_width), dtype=self._rows.dtype)
        rows[: self._n] = self._rows[: self._n]
        ids = np.zeros(cap, dtype=np.uint64)
        ids[: self._n] = self._ids[: self._n]
        sq = np.zeros(cap, dtype=np.float64)
        sq[: self._n] = self._sq[: self._n]
        self._rows, self._ids, self._sq = rows, ids, sq

    def _add_prepared(self, ids: np.ndarray, rows: np.ndarray) -> None:
        m = len(ids)
        self._grow(m)
        lo, hi = self._n, self._n + m
        self._rows[lo:hi] = rows
        self._ids[lo:hi] = ids
        if not self.metric.is_binary:
            r64 = rows.astype(np.float64)
            self._sq[lo:hi] = np.einsum("ij,ij->i", r64, r64)
        for p, i in enumerate(ids.tolist(), start=lo):
            self._pos[i] = p
        self._n = hi

    def _search_prepared(self, q: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        return topk_rows(self.rows, self.row_ids, q, k, self.metric, self._sq[: self._n])

    def _delete(self, ids: np.ndarray) -> None:
        for i in ids.tolist():
            p = self._pos.pop(i)
            last = self._n - 1
            if p != last:
                self._rows[p] = self._rows[last]
                self._ids[p] = self._ids[last]
                self._sq[p] = self._sq[last]
                self._pos[int(self._ids[p])] = p
            self._n = last

    @property
    def payload_bytes(self) -> int:
        return self.rows.nbytes
