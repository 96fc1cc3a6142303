"""Search structures behind the :class:`shitu.core.Index` contract."""

from .flat import FlatIndex, heap_select_k, select_k, topk_rows
from .hnsw import HnswIndex
from .ivf import IvfIndex, KMeansResult, default_nlist, kmeans

INDEX_TYPES = {"flat": FlatIndex, "ivf": IvfIndex, "hnsw": HnswIndex}

__all__ = [
    "FlatIndex",
    "HnswIndex",
    "INDEX_TYPES",
    "IvfIndex",
    "KMeansResult",
    "default_nlist",
    "heap_select_k",
    "kmeans",
    "select_k",
    "topk_rows",
]
