"""Hierarchical Navigable Small World graph index (HNSW32 by default).

Insert-only: there is no procedure for unlinking a node, so deletion is
rejected. Neighbour selection keeps the closest candidates (no diversity
heuristic); because pruning can strand a node at layer 0, every insertion
batch ends with a reachability pass that re-links stranded nodes. The graph
lives in flat arrays so the numba kernels can walk it:

* ``links[level, node, slot]`` holds neighbour node numbers (``-1`` padding)
* ``counts[level, node]`` is the neighbour count of ``node`` at ``level``

Nodes are numbered in insertion order; record ids map onto them.
"""

from __future__ import annotations

import heapq
import math
from typing import Union

import numba
import numpy as np
from numba import types
from numba.extending import overload

from ..core import EfTooSmall, Index, MetricKind, UnsupportedOperation
from ..metrics import popcount64

_IP = 1
_COSINE = 2


def _dist(a, b, metric):  # pragma: no cover - replaced by the overload inside jitted code
    raise NotImplementedError


@overload(_dist)
def _dist_overload(a, b, metric):
    if isinstance(a.dtype, types.Integer):

        def hamming(a, b, metric):
            s = 0
            for j in range(a.shape[0]):
                s += popcount64(a[j] ^ b[j])
            return float(s)

        return hamming

    def real(a, b, metric):
        s = 0.0
        if metric == _IP:
            for j in range(a.shape[0]):
                s += np.float64(a[j]) * np.float64(b[j])
            return -s
        for j in range(a.shape[0]):
            t = np.float64(a[j]) - np.float64(b[j])
            s += t * t
        if metric == _COSINE:
            return 0.5 * s
        return s

    return real


@numba.njit(cache=True)
def _search_layer(data, links, counts, level, q, entries, ef, metric):
    """Best-first search of one layer; returns (dists, nodes) sorted ascending."""
    visited = np.zeros(data.shape[0], np.uint8)
    e0 = np.int64(entries[0])
    d0 = _dist(data[e0], q, metric)
    cand = [(d0, e0)]
    best = [(-d0, -e0)]
    visited[e0] = 1
    for t in range(1, entries.shape[0]):
        e = np.int64(entries[t])
        if visited[e]:
            continue
        visited[e] = 1
        d = _dist(data[e], q, metric)
        heapq.heappush(cand, (d, e))
        heapq.heappush(best, (-d, -e))
        if len(best) > ef:
            heapq.heappop(best)
    while len(cand) > 0:
        dc, c = heapq.heappop(cand)
        wd, wn = best[0]
        if (dc, c) > (-wd, -wn):
            break
        for j in range(counts[level, c]):
            e = np.int64(links[level, c, j])
            if visited[e]:
                continue
            visited[e] = 1
            d = _dist(data[e], q, metric)
            wd, wn = best[0]
            if len(best) < ef or (d, e) < (-wd, -wn):
                heapq.heappush(cand, (d, e))
                heapq.heappush(best, (-d, -e))
                if len(best) > ef:
                    heapq.heappop(best)
    best.sort()
    n = len(best)
    dists = np.empty(n, np.float64)
    nodes = np.empty(n, np.int64)
    for t in range(n):
        # best holds negated keys, so sorted ascending == farthest first
        dists[n - 1 - t] = -best[t][0]
        nodes[n - 1 - t] = -best[t][1]
    return dists, nodes


@numba.njit(cache=True)
def _greedy(data, links, counts, level, q, ep, d_ep, metric):
    changed = True
    while changed:
        changed = False
        for j in range(counts[level, ep]):
            e = np.int64(links[level, ep, j])
            d = _dist(data[e], q, metric)
            if (d, e) < (d_ep, ep):
                ep, d_ep = e, d
                changed = True
    return ep, d_ep


@numba.njit(cache=True)
def _connect(data, links, counts, level, src, dst, cap, metric):
    """Add edge src -> dst; if the list overflows keep the ``cap`` closest."""
    c = counts[level, src]
    if c < cap:
        links[level, src, c] = dst
        counts[level, src] = c + 1
        return
    cand_d = np.empty(c + 1, np.float64)
    cand_n = np.empty(c + 1, np.int64)
    for j in range(c):
        cand_n[j] = links[level, src, j]
        cand_d[j] = _dist(data[cand_n[j]], data[src], metric)
    cand_n[c] = dst
    cand_d[c] = _dist(data[dst], data[src], metric)
    # node-ascending first, then a stable sort by distance: (dist, node) order
    by_node = np.argsort(cand_n, kind="mergesort")
    order = by_node[np.argsort(cand_d[by_node], kind="mergesort")]
    for j in range(cap):
        links[level, src, j] = cand_n[order[j]]
    counts[level, src] = cap


@numba.njit(cache=True)
def _insert_range(data, links, counts, levels, start, stop, entry, max_level, m, m0, ef_construction, metric):
    for node in range(start, stop):
        lvl = levels[node]
        if max_level < 0:
            entry = node
            max_level = lvl
            continue
        q = data[node]
        ep = np.int64(entry)
        d_ep = _dist(data[ep], q, metric)
        for lc in range(max_level, lvl, -1):
            ep, d_ep = _greedy(data[:node], links, counts, lc, q, ep, d_ep, metric)
        entries = np.empty(1, np.int64)
        entries[0] = ep
        for lc in range(min(lvl, max_level), -1, -1):
            dists, nodes = _search_layer(data[:node], links, counts, lc, q, entries, ef_construction, metric)
            cap = m0 if lc == 0 else m
            n_sel = min(m, nodes.shape[0])
            for j in range(n_sel):
                links[lc, node, j] = nodes[j]
            counts[lc, node] = n_sel
            for j in range(n_sel):
                _connect(data, links, counts, lc, nodes[j], node, cap, metric)
            entries = nodes
        if lvl > max_level:
            entry = node
            max_level = lvl
    return entry, max_level


@numba.njit(cache=True)
def _search(data, links, counts, q, entry, max_level, ef, metric):
    ep = np.int64(entry)
    d_ep = _dist(data[ep], q, metric)
    for lc in range(max_level, 0, -1):
        ep, d_ep = _greedy(data, links, counts, lc, q, ep, d_ep, metric)
    entries = np.empty(1, np.int64)
    entries[0] = ep
    return _search_layer(data, links, counts, 0, q, entries, ef, metric)


@numba.njit(cache=True)
def _mark_reachable(links, counts, start, seen):
    """Flood ``seen`` from ``start`` along layer-0 edges; returns nodes newly marked."""
    if seen[start]:
        return 0
    stack = [np.int64(start)]
    seen[start] = 1
    marked = 1
    while len(stack) > 0:
        node = stack.pop()
        for j in range(counts[0, node]):
            nb = np.int64(links[0, node, j])
            if not seen[nb]:
                seen[nb] = 1
                marked += 1
                stack.append(nb)
    return marked


@numba.njit(cache=True)
def _repair_layer0(data, links, counts, n, entry, max_level, m0, ef, metric):
    """Give every node unreachable from ``entry`` at layer 0 an in-edge.

    Closest-M pruning can drop a node's last incoming edge. Each stranded node
    gets an edge from its nearest reachable node that has spare degree; if no
    reachable node has room, the nearest one gives up its farthest neighbour
    and reachability is recomputed. Returns the number of edges added.
    """
    seen = np.zeros(n, np.uint8)
    reached = _mark_reachable(links, counts, entry, seen)
    added = 0
    rounds = 0
    while reached < n and rounds <= n:
        rounds += 1
        u = 0
        while seen[u]:
            u += 1
        q = data[u]
        dists, nodes = _search(data[:n], links, counts, q, entry, max_level, ef, metric)
        p = -1
        for t in range(nodes.shape[0]):
            cand = nodes[t]
            if seen[cand] and counts[0, cand] < m0:
                p = cand
                break
        if p < 0:
            best = np.inf
            for cand in range(n):
                if seen[cand] and counts[0, cand] < m0:
                    d = _dist(data[cand], q, metric)
                    if d < best:
                        best, p = d, cand
        if p >= 0:
            links[0, p, counts[0, p]] = u
            counts[0, p] += 1
            added += 1
            reached += _mark_reachable(links, counts, u, seen)
            continue
        # every reachable node is full: swap out the nearest one's farthest edge
        p = np.int64(entry)
        for t in range(nodes.shape[0]):
            if seen[nodes[t]]:
                p = nodes[t]
                break
        far_j = 0
        far_d = -1.0
        for j in range(counts[0, p]):
            d = _dist(data[links[0, p, j]], data[p], metric)
            if d > far_d:
                far_d, far_j = d, j
        links[0, p, far_j] = u
        added += 1
        seen[:] = 0
        reached = _mark_reachable(links, counts, entry, seen)
    return added


_METRIC_KERNEL_CODE = {
    MetricKind.L2: 0,
    MetricKind.INNER_PRODUCT: _IP,
    MetricKind.COSINE: _COSINE,
    MetricKind.HAMMING: 3,
}


class HnswIndex(Index):
    kind = "hnsw"

    def __init__(
        self,
        dim: int,
        metric: Union[str, MetricKind] = MetricKind.L2,
        M: int = 32,
        ef_construction: int = 200,
        ef_search: int = 64,
        seed: int = 0,
    ) -> None:
        super().__init__(dim, metric)
        if M < 2:
            raise ValueError(f"hnsw.init: M must be >= 2, got {M}")
        if ef_construction < 1 or ef_search < 1:
            raise EfTooSmall("hnsw.init", "ef values must be >= 1")
        self.M = int(M)
        self.M0 = 2 * self.M
        self.ef_construction = int(ef_construction)
        self.ef_search = int(ef_search)
        self.seed = int(seed)
        self.level_mult = 1.0 / math.log(self.M)
        self._rng = np.random.default_rng(self.seed)
        dtype = np.uint8 if self.metric.is_binary else np.float32
        self._data = np.zeros((0, self.row_width), dtype=dtype)
        self._links = np.full((1, 0, self.M0), -1, dtype=np.int32)
        self._counts = np.zeros((1, 0), dtype=np.int32)
        self._levels = np.zeros(0, dtype=np.int32)
        self._ids = np.zeros(0, dtype=np.uint64)
        self._n = 0
        self.entry_point = -1
        self.max_level = -1
        self._node_of: dict[int, int] = {}

    # -- graph accessors (read-only views) -----------------------------------------

    @property
    def node_count(self) -> int:
        return self._n

    @property
    def levels(self) -> np.ndarray:
        return self._levels[: self._n]

    @property
    def node_ids(self) -> np.ndarray:
        return self._ids[: self._n]

    def node_of(self, record_id: int) -> int:
        return self._node_of[int(record_id)]

    def neighbors(self, node: int, level: int) -> np.ndarray:
        if level >= self._links.shape[0]:
            return np.zeros(0, np.int32)
        return self._links[level, node, : self._counts[level, node]].copy()

    # -- construction ------------------------------------------------------------------

    def draw_level(self) -> int:
        u = 1.0 - self._rng.random()  # uniform on (0, 1]
        return int(math.floor(-math.log(u) * self.level_mult))

    def _reserve(self, n_nodes: int, top_level: int) -> None:
        cap = self._data.shape[0]
        n_levels = self._links.shape[0]
        if n_nodes <= cap and top_level < n_levels:
            return
        new_cap = max(n_nodes, 2 * cap, 16) if n_nodes > cap else cap
        new_levels = max(n_levels, top_level + 1)
        data = np.zeros((new_cap, self.row_width), dtype=self._data.dtype)
        data[: self._n] = self._data[: self._n]
        links = np.full((new_levels, new_cap, self.M0), -1, dtype=np.int32)
        links[:n_levels, : self._n] = self._links[:, : self._n]
        counts = np.zeros((new_levels, new_cap), dtype=np.int32)
        counts[:n_levels, : self._n] = self._counts[:, : self._n]
        levels = np.zeros(new_cap, dtype=np.int32)
        levels[: self._n] = self._levels[: self._n]
        ids = np.zeros(new_cap, dtype=np.uint64)
        ids[: self._n] = self._ids[: self._n]
        self._data, self._links, self._counts, self._levels, self._ids = data, links, counts, levels, ids

    def _kernel_data(self) -> np.ndarray:
        if self.metric.is_binary and self.row_width % 8 == 0:
            return self._data.view(np.uint64)
        return self._data

    def _add_prepared(self, ids: np.ndarray, rows: np.ndarray) -> None:
        m = len(ids)
        new_levels = np.array([self.draw_level() for _ in range(m)], dtype=np.int32)
        self._reserve(self._n + m, int(new_levels.max()))
        lo, hi = self._n, self._n + m
        self._data[lo:hi] = rows
        self._levels[lo:hi] = new_levels
        self._ids[lo:hi] = ids
        self.entry_point, self.max_level = _insert_range(
            self._kernel_data(),
            self._links,
            self._counts,
            self._levels,
            lo,
            hi,
            self.entry_point,
            self.max_level,
            self.M,
            self.M0,
            self.ef_construction,
            _METRIC_KERNEL_CODE[self.metric],
        )
        for node, i in enumerate(ids.tolist(), start=lo):
            self._node_of[i] = node
        self._n = hi
        _repair_layer0(
            self._kernel_data(),
            self._links,
            self._counts,
            hi,
            self.entry_point,
            self.max_level,
            self.M0,
            self.ef_construction,
            _METRIC_KERNEL_CODE[self.metric],
        )

    # -- search ------------------------------------------------------------------------

    def search(self, query, k: int, ef_search: Union[int, None] = None, **params):
        ef = self.ef_search if ef_search is None else int(ef_search)
        if ef < k:
            raise EfTooSmall("hnsw.search", f"ef_search={ef} must be >= k={k}")
        return super().search(query, k, ef_search=ef)

    def _search_prepared(self, q: np.ndarray, k: int, ef_search: int = 64) -> tuple[np.ndarray, np.ndarray]:
        data = self._kernel_data()
        if self.metric.is_binary and self.row_width % 8 == 0:
            q = q.view(np.uint64)
        dists, nodes = _search(
            data[: self._n],
            self._links,
            self._counts,
            q,
            self.entry_point,
            self.max_level,
            ef_search,
            _METRIC_KERNEL_CODE[self.metric],
        )
        ids = self._ids[nodes]
        order = np.lexsort((ids, dists))[:k]
        dists = dists[order]
        if self.metric is MetricKind.L2:
            dists = np.sqrt(dists)
        return dists, ids[order]

    def _delete(self, ids: np.ndarray) -> None:
        raise UnsupportedOperation("hnsw.delete", "HNSW only supports adding elements after the graph is built")

    def delete(self, ids) -> int:
        # rejected even for unknown ids or an empty index
        raise UnsupportedOperation("hnsw.delete", "HNSW only supports adding elements after the graph is built")

    # -- level generator state (persisted with the index) --------------------------------

    @property
    def rng_state(self) -> dict:
        return self._rng.bit_generator.state

    @rng_state.setter
    def rng_state(self, state: dict) -> None:
        self._rng.bit_generator.state = state
