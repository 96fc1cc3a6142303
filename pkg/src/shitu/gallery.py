"""Labelled feature gallery and the ``PPSG`` on-disk container.

Container layout (all integers little-endian)::

    magic "PPSG" | u32 version | u8 payload_kind | u32 dim_or_nbits | u64 count
    count rows   (float32 x dim, or nbits/8 packed bytes)
    sections     (optional; repeated: 4-byte tag | u64 length | bytes)
    u32 CRC32 over rows + sections

A plain feature file has no sections. Stores add ``IDS_`` and ``LBLS``; saved
indices add an ``INDX`` section describing their structure, with the rows in
the index's own storage order.
"""

from __future__ import annotations

import csv
import io
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence, Union

import numpy as np

from .core import (
    METRIC_CODES,
    METRIC_FROM_CODE,
    BadHeader,
    BinaryCode,
    ChecksumMismatch,
    DimMismatch,
    DuplicateId,
    GalleryRecord,
    Index,
    MalformedRow,
    MetricKind,
    RowCountMismatch,
    SearchResult,
    Truncated,
    UnknownId,
    VersionMismatch,
    as_code_matrix,
    as_embedding_matrix,
)
from .index import FlatIndex, HnswIndex, IvfIndex
from .metrics import binarize_matrix

MAGIC = b"PPSG"
VERSION = 1
PAYLOAD_FLOAT = 0
PAYLOAD_BINARY = 1
HEADER = struct.Struct("<4sIBIQ")
TRAILER = struct.Struct("<I")

PathLike = Union[str, Path]


# -----------------------------------------------------------------------------
# Container
# -----------------------------------------------------------------------------


@dataclass
class Container:
    payload_kind: int
    width: int  # dim for float payloads, nbits for binary
    rows: np.ndarray
    sections: dict[bytes, bytes] = field(default_factory=dict)

    @property
    def count(self) -> int:
        return int(self.rows.shape[0])


def _row_bytes(kind: int, width: int) -> int:
    return 4 * width if kind == PAYLOAD_FLOAT else width // 8


def encode_container(c: Container) -> bytes:
    if c.payload_kind == PAYLOAD_FLOAT:
        body = np.ascontiguousarray(c.rows, dtype="<f4").tobytes()
    else:
        body = np.ascontiguousarray(c.rows, dtype=np.uint8).tobytes()
    parts = [body]
    for tag, blob in c.sections.items():
        parts.append(struct.pack("<4sQ", tag, len(blob)))
        parts.append(blob)
    payload = b"".join(parts)
    head = HEADER.pack(MAGIC, VERSION, c.payload_kind, c.width, c.count)
    return head + payload + TRAILER.pack(zlib.crc32(payload))


def decode_container(buf: bytes, op: str = "gallery.load") -> Container:
    if len(buf) < HEADER.size:
        if len(buf) >= 4 and buf[:4] != MAGIC:
            raise BadHeader(op, f"bad magic {buf[:4]!r}")
        raise Truncated(op, f"file is {len(buf)} bytes, shorter than the {HEADER.size}-byte header")
    magic, version, kind, width, count = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadHeader(op, f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatch(op, f"file version {version}, this reader supports {VERSION}")
    if kind not in (PAYLOAD_FLOAT, PAYLOAD_BINARY):
        raise BadHeader(op, f"unknown payload kind {kind}")
    if width == 0 or (kind == PAYLOAD_BINARY and width % 8):
        raise BadHeader(op, f"invalid {'nbits' if kind else 'dim'} {width}")
    row_len = _row_bytes(kind, width)
    rows_end = HEADER.size + row_len * count
    if len(buf) < rows_end + TRAILER.size:
        raise Truncated(op, f"file is {len(buf)} bytes, need at least {rows_end + TRAILER.size} for {count} rows")
    payload = buf[HEADER.size : len(buf) - TRAILER.size]
    (crc,) = TRAILER.unpack_from(buf, len(buf) - TRAILER.size)
    if zlib.crc32(payload) != crc:
        raise ChecksumMismatch(op, "payload CRC32 does not match trailer")
    if kind == PAYLOAD_FLOAT:
        rows = np.frombuffer(buf, dtype="<f4", count=count * width, offset=HEADER.size)
        rows = rows.astype(np.float32).reshape(count, width)
    else:
        rows = np.frombuffer(buf, dtype=np.uint8, count=count * row_len, offset=HEADER.size)
        rows = rows.reshape(count, row_len).copy()
    sections: dict[bytes, bytes] = {}
    pos, end = rows_end, len(buf) - TRAILER.size
    while pos < end:
        if end - pos < 12:
            raise Truncated(op, "dangling bytes after rows")
        tag, length = struct.unpack_from("<4sQ", buf, pos)
        pos += 12
        if pos + length > end:
            raise Truncated(op, f"section {tag!r} overruns the file")
        sections[tag] = bytes(buf[pos : pos + length])
        pos += length
    return Container(kind, width, rows, sections)


def write_features(path: PathLike, rows) -> None:
    """Write a plain feature file: float matrix, or packed uint8 codes (binary)."""
    arr = np.asarray(rows)
    if arr.dtype == np.uint8:
        c = Container(PAYLOAD_BINARY, 8 * arr.shape[1], arr)
    else:
        arr = as_embedding_matrix(arr, "gallery.write_features")
        c = Container(PAYLOAD_FLOAT, arr.shape[1], arr)
    Path(path).write_bytes(encode_container(c))


def read_features(path: PathLike, csv_format: bool = False) -> np.ndarray:
    """Float32 (n, dim) matrix or uint8 (n, nbits/8) codes, depending on the file."""
    if csv_format:
        return read_csv_features(path)
    return decode_container(Path(path).read_bytes(), "gallery.read_features").rows


def read_csv_features(path: PathLike) -> np.ndarray:
    rows: list[list[float]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or all(not cell.strip() for cell in rec):
                continue
            try:
                rows.append([float(cell) for cell in rec])
            except ValueError:
                raise MalformedRow("gallery.ingest", f"{path}:{lineno}: non-numeric value") from None
            if len(rows[-1]) != len(rows[0]):
                raise MalformedRow(
                    "gallery.ingest", f"{path}:{lineno}: {len(rows[-1])} values, expected {len(rows[0])}"
                )
    if not rows:
        return np.zeros((0, 0), np.float32)
    return as_embedding_matrix(rows, "gallery.ingest")


def read_labels(path: PathLike) -> list[str]:
    labels = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            lab = line.rstrip("\r\n")
            if not lab:
                raise MalformedRow("gallery.ingest", f"{path}:{lineno}: empty label")
            labels.append(lab)
    return labels


def write_labels(path: PathLike, labels: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for lab in labels:
            if "\n" in lab or "\r" in lab or not lab:
                raise ValueError(f"label {lab!r} cannot be written one-per-line")
            fh.write(lab + "\n")


# -----------------------------------------------------------------------------
# Gallery store
# -----------------------------------------------------------------------------


class GalleryStore:
    """Id-addressed labelled payloads of a single kind (float or binary).

    Labels are interned: each row carries an index into ``label_table``.
    """

    def __init__(self, width: int, binary: bool = False) -> None:
        self.binary = binary
        self.width = int(width)
        row_w = self.width // 8 if binary else self.width
        self._rows = np.zeros((0, row_w), dtype=np.uint8 if binary else np.float32)
        self._ids = np.zeros(0, dtype=np.uint64)
        self._label_idx = np.zeros(0, dtype=np.uint32)
        self.label_table: list[str] = []
        self._intern: dict[str, int] = {}
        self._pos: dict[int, int] = {}

    @property
    def payload_kind(self) -> str:
        return "binary" if self.binary else "float"

    @property
    def dim(self) -> int:
        return self.width

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, record_id: int) -> bool:
        return int(record_id) in self._pos

    @property
    def ids(self) -> np.ndarray:
        return self._ids

    @property
    def rows(self) -> np.ndarray:
        return self._rows

    @property
    def labels(self) -> list[str]:
        return [self.label_table[i] for i in self._label_idx.tolist()]

    @property
    def payload_bytes(self) -> int:
        return int(self._rows.nbytes)

    def add_arrays(self, ids, rows, labels: Sequence[str]) -> int:
        op = "gallery.add"
        ids = np.asarray(ids, dtype=np.uint64).ravel()
        rows = as_code_matrix(rows, op) if self.binary else as_embedding_matrix(rows, op)
        row_w = self.width // 8 if self.binary else self.width
        if rows.shape[1] != row_w:
            raise DimMismatch(op, f"rows have width {rows.shape[1]}, gallery expects {row_w}")
        if not (len(ids) == len(rows) == len(labels)):
            raise RowCountMismatch(op, f"{len(ids)} ids, {len(rows)} rows, {len(labels)} labels")
        seen: set[int] = set()
        for i in ids.tolist():
            if i in self._pos or i in seen:
                raise DuplicateId(op, f"id {i} is already present")
            seen.add(i)
        if any(not lab for lab in labels):
            raise ValueError(f"{op}: labels must be non-empty")
        start = len(self._ids)
        for off, i in enumerate(ids.tolist()):
            self._pos[i] = start + off
        idx = np.empty(len(labels), dtype=np.uint32)
        for j, lab in enumerate(labels):
            if lab not in self._intern:
                self._intern[lab] = len(self.label_table)
                self.label_table.append(lab)
            idx[j] = self._intern[lab]
        self._rows = np.concatenate([self._rows, rows])
        self._ids = np.concatenate([self._ids, ids])
        self._label_idx = np.concatenate([self._label_idx, idx])
        return len(ids)

    def add(self, records: Sequence[GalleryRecord]) -> int:
        records = list(records)
        if not records:
            return 0
        if self.binary:
            rows = as_code_matrix([r.payload for r in records], "gallery.add")
        else:
            rows = np.stack([np.asarray(r.payload, dtype=np.float32) for r in records])
        return self.add_arrays([r.id for r in records], rows, [r.label for r in records])

    def label(self, record_id: int) -> str:
        try:
            return self.label_table[self._label_idx[self._pos[int(record_id)]]]
        except KeyError:
            raise UnknownId("gallery.lookup_labels", f"id {record_id} is not in the gallery") from None

    def __getitem__(self, record_id: int) -> GalleryRecord:
        if int(record_id) not in self._pos:
            raise UnknownId("gallery.get", f"id {record_id} is not in the gallery")
        p = self._pos[int(record_id)]
        payload = BinaryCode.from_array(self._rows[p]) if self.binary else self._rows[p].copy()
        return GalleryRecord(int(self._ids[p]), self.label(record_id), payload)

    def records(self) -> Iterator[GalleryRecord]:
        for i in self._ids.tolist():
            yield self[i]

    def binarized(self) -> "GalleryStore":
        """Sign-binarised copy with the same ids and labels."""
        if self.binary:
            return self
        out = GalleryStore(self.width, binary=True)
        out.add_arrays(self._ids, binarize_matrix(self._rows), self.labels)
        return out

    def build_index(self, kind: str = "flat", metric: Union[str, MetricKind, None] = None, **params) -> Index:
        """Build and fill an index over this gallery (IVF is trained on all rows)."""
        if metric is None:
            metric = MetricKind.HAMMING if self.binary else MetricKind.COSINE
        if kind == "flat":
            index: Index = FlatIndex(self.width, metric)
        elif kind == "ivf":
            index = IvfIndex(self.width, metric, **params)
            index.train(self._rows)
        elif kind == "hnsw":
            index = HnswIndex(self.width, metric, **params)
        else:
            raise ValueError(f"gallery.build_index: unknown index kind {kind!r}")
        index.add_arrays(self._ids, self._rows, self.labels)
        return index


def ingest(features_path: PathLike, labels_path: PathLike, csv_format: bool = False) -> GalleryStore:
    """Gallery from a feature file and a row-aligned label file; ids are 0..n-1."""
    rows = read_features(features_path, csv_format=csv_format)
    labels = read_labels(labels_path)
    if len(rows) != len(labels):
        raise RowCountMismatch(
            "gallery.ingest", f"{features_path} has {len(rows)} rows but {labels_path} has {len(labels)} labels"
        )
    binary = rows.dtype == np.uint8
    store = GalleryStore(rows.shape[1] * 8 if binary else rows.shape[1], binary=binary)
    store.add_arrays(np.arange(len(rows), dtype=np.uint64), rows, labels)
    return store


def lookup_labels(store: GalleryStore, results: Sequence[SearchResult]) -> list[SearchResult]:
    """Attach gallery labels to search hits, preserving rank order."""
    return [SearchResult(r.distance, r.id, store.label(r.id)) for r in results]


# -----------------------------------------------------------------------------
# Save / load
# -----------------------------------------------------------------------------

_INDEX_KIND_CODES = {"flat": 0, "ivf": 1, "hnsw": 2}
_INDEX_KIND_FROM_CODE = {v: k for k, v in _INDEX_KIND_CODES.items()}


def _encode_labels(labels: Sequence[str]) -> bytes:
    table: dict[str, int] = {}
    idx = np.empty(len(labels), dtype="<u4")
    for j, lab in enumerate(labels):
        idx[j] = table.setdefault(lab, len(table))
    out = io.BytesIO()
    out.write(struct.pack("<I", len(table)))
    for lab in table:
        raw = lab.encode("utf-8")
        out.write(struct.pack("<I", len(raw)))
        out.write(raw)
    out.write(idx.tobytes())
    return out.getvalue()


def _decode_labels(blob: bytes, count: int) -> list[str]:
    (n,) = struct.unpack_from("<I", blob)
    pos = 4
    table = []
    for _ in range(n):
        (ln,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        table.append(blob[pos : pos + ln].decode("utf-8"))
        pos += ln
    idx = np.frombuffer(blob, dtype="<u4", count=count, offset=pos)
    return [table[i] for i in idx.tolist()]


_PCG = struct.Struct("<QQQQBI")


def _pcg_state_pack(state: dict) -> bytes:
    s = state["state"]["state"]
    inc = state["state"]["inc"]
    mask = (1 << 64) - 1
    return _PCG.pack(s & mask, s >> 64, inc & mask, inc >> 64, state["has_uint32"], state["uinteger"])


def _unpack_pcg(blob: bytes) -> dict:
    s_lo, s_hi, i_lo, i_hi, has, uint = _PCG.unpack(blob)
    return {
        "bit_generator": "PCG64",
        "state": {"state": s_lo | (s_hi << 64), "inc": i_lo | (i_hi << 64)},
        "has_uint32": has,
        "uinteger": uint,
    }


def _index_container(index: Index) -> Container:
    kind = _INDEX_KIND_CODES[index.kind]
    head = struct.pack("<BB", kind, METRIC_CODES[index.metric])
    if isinstance(index, FlatIndex):
        rows, ids = index.rows, index.row_ids
        body = b""
    elif isinstance(index, IvfIndex):
        if not index.trained:
            raise ValueError("gallery.save: cannot save an untrained IVF index")
        rows = np.concatenate(index._cell_rows)
        ids = np.concatenate(index._cell_ids)
        sizes = np.array(index.cell_sizes(), dtype="<u8")
        body = (
            struct.pack("<IIQI", index.nlist, index.nprobe, index.seed, index.max_iters)
            + np.ascontiguousarray(index.centroids, dtype="<f8").tobytes()
            + sizes.tobytes()
        )
    elif isinstance(index, HnswIndex):
        n = index.node_count
        rows, ids = index._data[:n], index.node_ids
        parts = [
            struct.pack(
                "<IIIIQqiQ",
                index.M,
                index.M0,
                index.ef_construction,
                index.ef_search,
                index.seed,
                index.entry_point,
                index.max_level,
                n,
            ),
            _pcg_state_pack(index.rng_state),
            np.ascontiguousarray(index.levels, dtype="<i4").tobytes(),
        ]
        levels = index.levels
        for lc in range(index.max_level + 1):
            nodes = np.flatnonzero(levels >= lc)
            counts = index._counts[lc, nodes].astype("<u2")
            links = index._links[lc, nodes]
            mask = np.arange(index.M0)[None, :] < counts[:, None]
            parts.append(counts.tobytes())
            parts.append(links[mask].astype("<u4").tobytes())
        body = b"".join(parts)
    else:
        raise TypeError(f"gallery.save: unsupported index type {type(index).__name__}")
    labels = [index.label_of(i) for i in ids.tolist()]
    binary = index.metric.is_binary
    return Container(
        PAYLOAD_BINARY if binary else PAYLOAD_FLOAT,
        index.dim,
        rows,
        {
            b"IDS_": np.ascontiguousarray(ids, dtype="<u8").tobytes(),
            b"LBLS": _encode_labels(labels),
            b"INDX": head + body,
        },
    )


def _restore_index(c: Container, ids: np.ndarray, labels: list[str]) -> Index:
    blob = c.sections[b"INDX"]
    kind_code, metric_code = struct.unpack_from("<BB", blob)
    kind = _INDEX_KIND_FROM_CODE[kind_code]
    metric = METRIC_FROM_CODE[metric_code]
    pos = 2
    if kind == "flat":
        index: Index = FlatIndex(c.width, metric)
        index._add_prepared(ids, c.rows)
    elif kind == "ivf":
        nlist, nprobe, seed, max_iters = struct.unpack_from("<IIQI", blob, pos)
        pos += struct.calcsize("<IIQI")
        index = IvfIndex(c.width, metric, nlist=nlist, nprobe=nprobe, seed=seed, max_iters=max_iters)
        cent = np.frombuffer(blob, dtype="<f8", count=nlist * c.width, offset=pos).reshape(nlist, c.width)
        pos += cent.nbytes
        sizes = np.frombuffer(blob, dtype="<u8", count=nlist, offset=pos).astype(np.int64)
        index._set_centroids(cent.astype(np.float64))
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        for cell in range(nlist):
            lo, hi = bounds[cell], bounds[cell + 1]
            rows = c.rows[lo:hi]
            r64 = rows.astype(np.float64)
            index._cell_rows[cell] = rows.copy()
            index._cell_ids[cell] = ids[lo:hi].copy()
            index._cell_sq[cell] = np.einsum("ij,ij->i", r64, r64)
            for i in ids[lo:hi].tolist():
                index._cell_of[i] = cell
    else:
        hdr = struct.Struct("<IIIIQqiQ")
        M, M0, ef_c, ef_s, seed, entry, max_level, n = hdr.unpack_from(blob, pos)
        pos += hdr.size
        index = HnswIndex(c.width, metric, M=M, ef_construction=ef_c, ef_search=ef_s, seed=seed)
        index.rng_state = _unpack_pcg(blob[pos : pos + _PCG.size])
        pos += _PCG.size
        levels = np.frombuffer(blob, dtype="<i4", count=n, offset=pos).astype(np.int32)
        pos += 4 * n
        index._reserve(n, max(max_level, 0))
        index._data[:n] = c.rows
        index._levels[:n] = levels
        index._ids[:n] = ids
        for lc in range(max_level + 1):
            nodes = np.flatnonzero(levels >= lc)
            counts = np.frombuffer(blob, dtype="<u2", count=len(nodes), offset=pos).astype(np.int32)
            pos += 2 * len(nodes)
            total = int(counts.sum())
            flat = np.frombuffer(blob, dtype="<u4", count=total, offset=pos).astype(np.int32)
            pos += 4 * total
            mask = np.arange(M0)[None, :] < counts[:, None]
            block = np.full((len(nodes), M0), -1, dtype=np.int32)
            block[mask] = flat
            index._links[lc, nodes] = block
            index._counts[lc, nodes] = counts
        index._n = n
        index.entry_point, index.max_level = entry, max_level
        for node, i in enumerate(ids.tolist()):
            index._node_of[i] = node
    for i, lab in zip(ids.tolist(), labels):
        index._labels[i] = lab
    return index


def save(obj: Union[GalleryStore, Index], path: PathLike) -> int:
    """Persist a gallery store or an index; returns the number of bytes written."""
    if isinstance(obj, GalleryStore):
        c = Container(
            PAYLOAD_BINARY if obj.binary else PAYLOAD_FLOAT,
            obj.width,
            obj.rows,
            {b"IDS_": obj.ids.astype("<u8").tobytes(), b"LBLS": _encode_labels(obj.labels)},
        )
    elif isinstance(obj, Index):
        c = _index_container(obj)
    else:
        raise TypeError(f"gallery.save: cannot save {type(obj).__name__}")
    data = encode_container(c)
    Path(path).write_bytes(data)
    return len(data)


def load(path: PathLike) -> Union[GalleryStore, Index]:
    """Inverse of :func:`save`. A plain feature file loads as a store with ids 0..n-1
    and placeholder labels ``"row<i>"``."""
    c = decode_container(Path(path).read_bytes(), "gallery.load")
    if b"IDS_" in c.sections:
        ids = np.frombuffer(c.sections[b"IDS_"], dtype="<u8").astype(np.uint64)
    else:
        ids = np.arange(c.count, dtype=np.uint64)
    if len(ids) != c.count:
        raise RowCountMismatch("gallery.load", f"{len(ids)} ids for {c.count} rows")
    if b"LBLS" in c.sections:
        labels = _decode_labels(c.sections[b"LBLS"], c.count)
    else:
        labels = [f"row{i}" for i in range(c.count)]
    if b"INDX" in c.sections:
        return _restore_index(c, ids, labels)
    store = GalleryStore(c.width, binary=c.payload_kind == PAYLOAD_BINARY)
    store.add_arrays(ids, c.rows, labels)
    return store


def load_index(path: PathLike) -> Index:
    obj = load(path)
    if not isinstance(obj, Index):
        raise BadHeader("gallery.load", f"{path} holds a gallery, not an index")
    return obj
