"""Inverted-file index: a k-means coarse quantizer over per-cell posting lists."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from ..core import (
    BadNprobe,
    DimMismatch,
    Index,
    MetricKind,
    NotTrained,
    TooFewSamples,
    UnsupportedMetric,
    as_embedding_matrix,
)
from .flat import topk_rows

DEFAULT_MAX_ITERS = 25


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignment: np.ndarray
    inertia_history: list[float] = field(default_factory=list)
    n_iter: int = 0


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    xn = np.einsum("ij,ij->i", x, x)
    cn = np.einsum("ij,ij->i", c, c)
    return np.maximum(xn[:, None] + cn[None, :] - 2.0 * (x @ c.T), 0.0)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(x, x[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=closest / total))
        else:
            # fewer distinct points than cells: pick any unchosen sample
            rest = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(rest))
        chosen.append(nxt)
        closest = np.minimum(closest, _sq_dists(x, x[nxt : nxt + 1])[:, 0])
    return x[chosen].copy()


def kmeans(
    samples,
    k: int,
    max_iters: int = DEFAULT_MAX_ITERS,
    seed: int = 0,
    spherical: bool = False,
) -> KMeansResult:
    """Lloyd's algorithm from a k-means++ start.

    With ``spherical=True`` samples and centroids are kept on the unit sphere,
    which is the right objective for inner-product and cosine indices. Empty
    cells are re-seeded with the point of the largest cell farthest from that
    cell's centroid. Inertia is recorded after every assignment step.
    """
    x = as_embedding_matrix(samples, "ivf.train").astype(np.float64)
    if x.shape[0] < k:
        raise TooFewSamples("ivf.train", f"need at least nlist={k} samples, got {x.shape[0]}")
    if spherical:
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        x = x / np.where(norms > 0, norms, 1.0)
    rng = np.random.default_rng(seed)
    c = _kmeans_pp(x, k, rng)
    history: list[float] = []
    prev: Optional[np.ndarray] = None
    it = 0
    for it in range(1, max_iters + 1):
        d = _sq_dists(x, c)
        assign = d.argmin(axis=1)
        history.append(float(d[np.arange(len(x)), assign].sum()))
        if prev is not None and np.array_equal(assign, prev):
            break
        counts = np.bincount(assign, minlength=k)
        sums = np.zeros_like(c)
        np.add.at(sums, assign, x)
        nonempty = counts > 0
        c[nonempty] = sums[nonempty] / counts[nonempty, None]
        if spherical:
            c[nonempty] /= np.linalg.norm(c[nonempty], axis=1, keepdims=True)
        for e in np.flatnonzero(~nonempty):
            big = int(counts.argmax())
            members = np.flatnonzero(assign == big)
            far = members[np.argmax(((x[members] - c[big]) ** 2).sum(axis=1))]
            c[e] = x[far]
            assign[far] = e
            counts[big] -= 1
            counts[e] += 1
        prev = assign
    return KMeansResult(centroids=c, assignment=prev if prev is not None else assign,
                        inertia_history=history, n_iter=it)


def default_nlist(n: int) -> int:
    return max(1, int(round(math.sqrt(n))))


class IvfIndex(Index):
    """IVF over float vectors (L2, inner product or cosine).

    Every record sits in exactly one cell, chosen as its nearest centroid at
    insertion time. Searching scans the ``nprobe`` cells whose centroids are
    nearest the query with the same exact scoring as :class:`FlatIndex`, so
    ``nprobe == nlist`` reproduces flat search.
    """

    kind = "ivf"

    def __init__(
        self,
        dim: int,
        metric: Union[str, MetricKind] = MetricKind.L2,
        nlist: Optional[int] = None,
        nprobe: int = 1,
        seed: int = 0,
        max_iters: int = DEFAULT_MAX_ITERS,
    ) -> None:
        super().__init__(dim, metric)
        if self.metric.is_binary:
            raise UnsupportedMetric("ivf.init", "IVF supports l2, ip and cosine only")
        if nlist is not None and nlist < 1:
            raise BadNprobe("ivf.init", f"nlist must be >= 1, got {nlist}")
        if nprobe < 1:
            raise BadNprobe("ivf.init", f"nprobe must be >= 1, got {nprobe}")
        self.nlist = nlist
        self.nprobe = nprobe
        self.seed = int(seed)
        self.max_iters = int(max_iters)
        self.centroids: Optional[np.ndarray] = None
        self.inertia_history: list[float] = []
        self._cell_ids: list[np.ndarray] = []
        self._cell_rows: list[np.ndarray] = []
        self._cell_sq: list[np.ndarray] = []
        self._cell_of: dict[int, int] = {}

    @property
    def trained(self) -> bool:
        return self.centroids is not None

    # -- training --------------------------------------------------------------

    def train(self, samples) -> np.ndarray:
        x = as_embedding_matrix(samples, "ivf.train")
        if x.shape[1] != self.dim:
            raise DimMismatch("ivf.train", f"samples have dim {x.shape[1]}, index expects {self.dim}")
        nlist = self.nlist if self.nlist is not None else default_nlist(x.shape[0])
        spherical = self.metric is not MetricKind.L2
        res = kmeans(x, nlist, self.max_iters, self.seed, spherical=spherical)
        self._set_centroids(res.centroids)
        self.inertia_history = res.inertia_history
        return self.centroids

    def _set_centroids(self, centroids: np.ndarray) -> None:
        self.centroids = np.ascontiguousarray(centroids, dtype=np.float64)
        self.nlist = self.centroids.shape[0]
        if self.nprobe > self.nlist:
            self.nprobe = self.nlist
        self._cell_ids = [np.zeros(0, np.uint64) for _ in range(self.nlist)]
        self._cell_rows = [np.zeros((0, self.dim), np.float32) for _ in range(self.nlist)]
        self._cell_sq = [np.zeros(0, np.float64) for _ in range(self.nlist)]
        self._cell_of = {}

    def _centroid_scores(self, rows: np.ndarray) -> np.ndarray:
        r = rows.astype(np.float64)
        if self.metric is MetricKind.L2:
            return _sq_dists(r, self.centroids)
        return -(r @ self.centroids.T)

    def assign(self, rows) -> np.ndarray:
        """Cell number for each row: its nearest centroid (lowest index on ties)."""
        if not self.trained:
            raise NotTrained("ivf.assign", "index must be trained first")
        return self._centroid_scores(np.atleast_2d(rows)).argmin(axis=1)

    # -- contract hooks ----------------------------------------------------------

    def add_arrays(self, ids, payloads, labels) -> int:
        if not self.trained:
            raise NotTrained("ivf.add", "train the coarse quantizer before adding")
        return super().add_arrays(ids, payloads, labels)

    def _add_prepared(self, ids: np.ndarray, rows: np.ndarray) -> None:
        cells = self.assign(rows)
        r64 = rows.astype(np.float64)
        sq = np.einsum("ij,ij->i", r64, r64)
        for c in np.unique(cells):
            sel = cells == c
            self._cell_ids[c] = np.concatenate([self._cell_ids[c], ids[sel]])
            self._cell_rows[c] = np.concatenate([self._cell_rows[c], rows[sel]])
            self._cell_sq[c] = np.concatenate([self._cell_sq[c], sq[sel]])
        for i, c in zip(ids.tolist(), cells.tolist()):
            self._cell_of[i] = c

    def _delete(self, ids: np.ndarray) -> None:
        by_cell: dict[int, list[int]] = {}
        for i in ids.tolist():
            by_cell.setdefault(self._cell_of.pop(i), []).append(i)
        for c, gone in by_cell.items():
            keep = ~np.isin(self._cell_ids[c], np.array(gone, dtype=np.uint64))
            self._cell_ids[c] = self._cell_ids[c][keep]
            self._cell_rows[c] = self._cell_rows[c][keep]
            self._cell_sq[c] = self._cell_sq[c][keep]

    def search(self, query, k: int, nprobe: Optional[int] = None, **params):
        if not self.trained:
            raise NotTrained("ivf.search", "index must be trained first")
        nprobe = self.nprobe if nprobe is None else nprobe
        if not 1 <= nprobe <= self.nlist:
            raise BadNprobe("ivf.search", f"nprobe must be in [1, {self.nlist}], got {nprobe}")
        return super().search(query, k, nprobe=nprobe)

    def probe_cells(self, q, nprobe: int) -> np.ndarray:
        """The ``nprobe`` cells nearest to ``q`` (ties by cell number)."""
        scores = self._centroid_scores(np.atleast_2d(q))[0]
        return np.lexsort((np.arange(self.nlist), scores))[:nprobe]

    def _search_prepared(self, q: np.ndarray, k: int, nprobe: int = 1) -> tuple[np.ndarray, np.ndarray]:
        cells = self.probe_cells(q, nprobe)
        ids = np.concatenate([self._cell_ids[c] for c in cells])
        rows = np.concatenate([self._cell_rows[c] for c in cells])
        sq = np.concatenate([self._cell_sq[c] for c in cells])
        return topk_rows(rows, ids, q, k, self.metric, sq)

    # -- introspection -------------------------------------------------------------

    def cell_sizes(self) -> list[int]:
        return [len(c) for c in self._cell_ids]

    def cell_of(self, record_id: int) -> int:
        return self._cell_of[int(record_id)]

    def cell_members(self, cell: int) -> np.ndarray:
        return self._cell_ids[cell].copy()
