"""Domain types, errors and the index contract shared by every search structure."""

from __future__ import annotations

import enum
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np


# -----------------------------------------------------------------------------
# Errors
# -----------------------------------------------------------------------------


class ShituError(Exception):
    """Base error. ``op`` names the module operation that failed."""

    def __init__(self, op: str, message: str) -> None:
        self.op = op
        super().__init__(f"{op}: {message}")


class DimMismatch(ShituError, ValueError):
    pass


class LengthMismatch(ShituError, ValueError):
    pass


class ShapeMismatch(ShituError, ValueError):
    pass


class DuplicateId(ShituError, KeyError):
    def __str__(self) -> str:
        # KeyError would otherwise repr() the message
        return Exception.__str__(self)


class UnknownId(ShituError, KeyError):
    def __str__(self) -> str:
        return Exception.__str__(self)


class UnsupportedOperation(ShituError):
    pass


class UnsupportedMetric(ShituError, ValueError):
    pass


class ZeroVector(ShituError, ValueError):
    pass


class NonFinite(ShituError, ValueError):
    pass


class DimNotByteAligned(ShituError, ValueError):
    pass


class TooFewSamples(ShituError, ValueError):
    pass


class NotTrained(ShituError):
    pass


class BadNprobe(ShituError, ValueError):
    pass


class EfTooSmall(ShituError, ValueError):
    pass


class BadK(ShituError, ValueError):
    pass


class BadLabel(ShituError, ValueError):
    pass


class ZeroFeature(ShituError, ValueError):
    pass


class BadAlpha(ShituError, ValueError):
    pass


class DivergenceDetected(ShituError, ArithmeticError):
    pass


class RowCountMismatch(ShituError, ValueError):
    pass


class MalformedRow(ShituError, ValueError):
    pass


class BadHeader(ShituError, ValueError):
    pass


class VersionMismatch(ShituError, ValueError):
    pass


class ChecksumMismatch(ShituError, ValueError):
    pass


class Truncated(ShituError, ValueError):
    pass


# -----------------------------------------------------------------------------
# Types
# -----------------------------------------------------------------------------


class MetricKind(str, enum.Enum):
    L2 = "l2"
    INNER_PRODUCT = "ip"
    COSINE = "cosine"
    HAMMING = "hamming"

    @property
    def is_binary(self) -> bool:
        return self is MetricKind.HAMMING

    @classmethod
    def parse(cls, value: Union[str, "MetricKind"]) -> "MetricKind":
        if isinstance(value, MetricKind):
            return value
        key = value.strip().lower()
        aliases = {"inner_product": "ip", "innerproduct": "ip", "euclidean": "l2"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise UnsupportedMetric("core.metric", f"unknown metric {value!r}") from None


# Stable small integers for on-disk encoding.
METRIC_CODES = {
    MetricKind.L2: 0,
    MetricKind.INNER_PRODUCT: 1,
    MetricKind.COSINE: 2,
    MetricKind.HAMMING: 3,
}
METRIC_FROM_CODE = {v: k for k, v in METRIC_CODES.items()}


@dataclass(frozen=True)
class BinaryCode:
    """Bit-packed hash code; bit i of the code is the MSB-first bit i of ``bits``."""

    nbits: int
    bits: bytes

    def __post_init__(self) -> None:
        if self.nbits <= 0 or self.nbits % 8:
            raise DimNotByteAligned("core.BinaryCode", f"nbits={self.nbits} is not a positive multiple of 8")
        if len(self.bits) != self.nbits // 8:
            raise LengthMismatch(
                "core.BinaryCode", f"expected {self.nbits // 8} bytes for {self.nbits} bits, got {len(self.bits)}"
            )

    @property
    def nbytes(self) -> int:
        return len(self.bits)

    def as_array(self) -> np.ndarray:
        return np.frombuffer(self.bits, dtype=np.uint8)

    @classmethod
    def from_array(cls, packed: np.ndarray) -> "BinaryCode":
        packed = np.ascontiguousarray(packed, dtype=np.uint8).ravel()
        return cls(nbits=8 * packed.size, bits=packed.tobytes())


Payload = Union[np.ndarray, BinaryCode]


@dataclass(frozen=True)
class GalleryRecord:
    id: int
    label: str
    payload: Payload

    def __post_init__(self) -> None:
        if not (0 <= int(self.id) < 2**64):
            raise ValueError(f"record id {self.id} is not a non-negative 64-bit integer")
        if not self.label:
            raise ValueError("record label must be non-empty")


@dataclass(frozen=True, order=True)
class SearchResult:
    # field order gives (distance, id) lexicographic ordering
    distance: float
    id: int
    label: str = ""


def as_embedding(values, op: str = "core.embedding") -> np.ndarray:
    """Validate a single real feature vector and return it as a 1-D float32 array."""
    v = np.asarray(values, dtype=np.float32)
    if v.ndim != 1 or v.size == 0:
        raise DimMismatch(op, f"expected a non-empty 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NonFinite(op, "vector has NaN or Inf components")
    return v


def as_embedding_matrix(values, op: str = "core.embedding") -> np.ndarray:
    m = np.asarray(values, dtype=np.float32)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2 or m.shape[1] == 0:
        raise DimMismatch(op, f"expected an (n, dim) matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFinite(op, "matrix has NaN or Inf entries")
    return np.ascontiguousarray(m)


def as_code_matrix(values, op: str = "core.codes") -> np.ndarray:
    """Coerce BinaryCode(s) or packed uint8 rows into a contiguous (n, nbytes) uint8 matrix."""
    if isinstance(values, BinaryCode):
        return values.as_array()[None, :].copy()
    if isinstance(values, (list, tuple)) and values and isinstance(values[0], BinaryCode):
        widths = {c.nbytes for c in values}
        if len(widths) != 1:
            raise LengthMismatch(op, f"mixed code lengths {sorted(widths)}")
        return np.frombuffer(b"".join(c.bits for c in values), dtype=np.uint8).reshape(len(values), -1).copy()
    m = np.asarray(values)
    if m.dtype != np.uint8:
        raise LengthMismatch(op, f"binary payloads must be packed uint8, got {m.dtype}")
    if m.ndim == 1:
        m = m[None, :]
    return np.ascontiguousarray(m)


# -----------------------------------------------------------------------------
# Index contract
# -----------------------------------------------------------------------------


def normalize_rows(m: np.ndarray, op: str) -> np.ndarray:
    """L2-normalise float rows (computed in float64); zero rows are rejected."""
    m64 = m.astype(np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", m64, m64))
    if np.any(norms == 0.0):
        raise ZeroVector(op, "cosine metric is undefined for zero vectors")
    return (m64 / norms[:, None]).astype(np.float32)


class Index(ABC):
    """Uniform add / search / delete contract over a labelled gallery.

    Subclasses store payloads in the form the metric needs (normalised rows for
    cosine, packed bytes for Hamming) and implement ``_add_prepared``,
    ``_search_prepared`` and ``_delete``.
    """

    kind: str = "index"

    def __init__(self, dim: int, metric: Union[str, MetricKind] = MetricKind.L2) -> None:
        self.metric = MetricKind.parse(metric)
        if dim <= 0:
            raise DimMismatch(f"{self.kind}.init", f"dim must be positive, got {dim}")
        if self.metric.is_binary and dim % 8:
            raise DimNotByteAligned(f"{self.kind}.init", f"nbits={dim} is not a multiple of 8")
        self.dim = int(dim)
        self._labels: dict[int, str] = {}

    # -- public contract ------------------------------------------------------

    def __len__(self) -> int:
        return len(self._labels)

    @property
    def row_width(self) -> int:
        """Stored row width: floats per vector, or bytes per code."""
        return self.dim // 8 if self.metric.is_binary else self.dim

    def __contains__(self, record_id: int) -> bool:
        return int(record_id) in self._labels

    def ids(self) -> list[int]:
        return sorted(self._labels)

    def label_of(self, record_id: int) -> str:
        try:
            return self._labels[int(record_id)]
        except KeyError:
            raise UnknownId(f"{self.kind}.label_of", f"id {record_id} is not in the index") from None

    def add(self, records: Sequence[GalleryRecord]) -> int:
        records = list(records)
        if not records:
            return 0
        ids = np.array([r.id for r in records], dtype=np.uint64)
        labels = [r.label for r in records]
        payloads = [r.payload for r in records]
        if self.metric.is_binary:
            if not all(isinstance(p, (BinaryCode, np.ndarray)) for p in payloads):
                raise DimMismatch(f"{self.kind}.add", "Hamming index needs BinaryCode payloads")
            if any(isinstance(p, np.ndarray) and p.dtype != np.uint8 for p in payloads):
                raise DimMismatch(f"{self.kind}.add", "Hamming index needs BinaryCode payloads")
            rows = [p.as_array() if isinstance(p, BinaryCode) else p for p in payloads]
        else:
            if any(isinstance(p, BinaryCode) for p in payloads):
                raise DimMismatch(f"{self.kind}.add", f"{self.metric.value} index needs float payloads")
            rows = payloads
        widths = {np.asarray(r).size for r in rows}
        if widths != {self.row_width}:
            bad = sorted(widths - {self.row_width})[0]
            raise DimMismatch(f"{self.kind}.add", self._dim_message(bad))
        return self.add_arrays(ids, np.stack([np.asarray(r) for r in rows]), labels)

    def add_arrays(self, ids, payloads, labels: Sequence[str]) -> int:
        """Bulk insert: ``payloads`` is (n, dim) float or (n, nbits/8) packed uint8."""
        op = f"{self.kind}.add"
        ids = np.asarray(ids, dtype=np.uint64).ravel()
        rows = self._prepare_rows(payloads, op)
        if len(ids) != len(rows) or len(labels) != len(rows):
            raise RowCountMismatch(op, f"{len(ids)} ids, {len(rows)} payloads, {len(labels)} labels")
        self._check_new_ids(ids, op)
        if any(not lab for lab in labels):
            raise ValueError(f"{op}: labels must be non-empty")
        self._add_prepared(ids, rows)
        for i, lab in zip(ids.tolist(), labels):
            self._labels[i] = lab
        return len(ids)

    def search(self, query, k: int, **params) -> list[SearchResult]:
        """Up to ``k`` nearest records, ascending by ``(distance, id)``.

        ``params`` are index-specific knobs such as ``nprobe`` or ``ef_search``.
        """
        if k < 1:
            raise BadK(f"{self.kind}.search", f"k must be >= 1, got {k}")
        q = self._prepare_query(query, f"{self.kind}.search")
        if len(self) == 0:
            return []
        dists, ids = self._search_prepared(q, k, **params)
        return [SearchResult(float(d), int(i), self._labels[int(i)]) for d, i in zip(dists, ids)]

    def delete(self, ids: Iterable[int]) -> int:
        live = [int(i) for i in dict.fromkeys(int(i) for i in ids) if int(i) in self._labels]
        if live:
            self._delete(np.array(live, dtype=np.uint64))
            for i in live:
                del self._labels[i]
        return len(live)

    # -- hooks ---------------------------------------------------------------

    @abstractmethod
    def _add_prepared(self, ids: np.ndarray, rows: np.ndarray) -> None: ...

    @abstractmethod
    def _search_prepared(self, q: np.ndarray, k: int, **params) -> tuple[np.ndarray, np.ndarray]: ...

    def _delete(self, ids: np.ndarray) -> None:
        raise UnsupportedOperation(f"{self.kind}.delete", "this index does not support deletion")

    # -- validation ------------------------------------------------------------

    def _dim_message(self, got: int) -> str:
        unit = "bytes" if self.metric.is_binary else "components"
        return f"payload has {got} {unit}, index expects {self.row_width}"

    def _prepare_rows(self, payloads, op: str) -> np.ndarray:
        if self.metric.is_binary:
            rows = as_code_matrix(payloads, op)
        else:
            if isinstance(payloads, BinaryCode) or (
                isinstance(payloads, np.ndarray) and payloads.dtype == np.uint8
            ):
                raise DimMismatch(op, f"{self.metric.value} index needs float payloads")
            rows = as_embedding_matrix(payloads, op)
        if rows.shape[1] != self.row_width:
            raise DimMismatch(op, self._dim_message(rows.shape[1]))
        if self.metric is MetricKind.COSINE:
            rows = normalize_rows(rows, op)
        return rows

    def _prepare_query(self, query, op: str) -> np.ndarray:
        rows = self._prepare_rows(query, op)
        if rows.shape[0] != 1:
            raise DimMismatch(op, f"expected a single query, got {rows.shape[0]} rows")
        return rows[0]

    def _check_new_ids(self, ids: np.ndarray, op: str) -> None:
        seen: set[int] = set()
        for i in ids.tolist():
            if i in self._labels or i in seen:
                raise DuplicateId(op, f"id {i} is already present")
            seen.add(i)
