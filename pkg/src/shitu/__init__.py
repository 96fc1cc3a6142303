"""Labelled-gallery vector retrieval: exact and approximate indices, binary codes,
metric-learning losses and a small training harness."""

from .core import (
    BinaryCode,
    GalleryRecord,
    Index,
    MetricKind,
    SearchResult,
    ShituError,
)
from .gallery import GalleryStore, ingest, load, load_index, lookup_labels, save
from .index import FlatIndex, HnswIndex, IvfIndex
from .metrics import binarize, cosine_similarity, hamming_distance, inner_product, l2_distance

__all__ = [
    "BinaryCode",
    "FlatIndex",
    "GalleryRecord",
    "GalleryStore",
    "HnswIndex",
    "Index",
    "IvfIndex",
    "MetricKind",
    "SearchResult",
    "ShituError",
    "binarize",
    "cosine_similarity",
    "hamming_distance",
    "ingest",
    "inner_product",
    "l2_distance",
    "load",
    "load_index",
    "lookup_labels",
    "save",
]
