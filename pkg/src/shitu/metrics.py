"""Distance kernels and sign binarization.

Scalar helpers accept single vectors / codes. The ``*_to_rows`` kernels score one
query against a row matrix and are what the indices use; float kernels
accumulate in float64 regardless of the float32 storage type.
"""

from __future__ import annotations

import math

import numba
import numpy as np

from .core import (
    BinaryCode,
    DimMismatch,
    DimNotByteAligned,
    LengthMismatch,
    MetricKind,
    ZeroVector,
    as_embedding,
)


def _pair(a, b, op: str) -> tuple[np.ndarray, np.ndarray]:
    a = as_embedding(a, op).astype(np.float64)
    b = as_embedding(b, op).astype(np.float64)
    if a.shape != b.shape:
        raise DimMismatch(op, f"dims differ: {a.size} vs {b.size}")
    return a, b


def l2_distance(a, b) -> float:
    a, b = _pair(a, b, "metrics.l2_distance")
    diff = a - b
    return math.sqrt(float(diff @ diff))


def inner_product(a, b) -> float:
    a, b = _pair(a, b, "metrics.inner_product")
    return float(a @ b)


def cosine_similarity(a, b) -> float:
    a, b = _pair(a, b, "metrics.cosine_similarity")
    na = math.sqrt(float(a @ a))
    nb = math.sqrt(float(b @ b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("metrics.cosine_similarity", "cosine is undefined for a zero vector")
    return min(1.0, max(-1.0, float(a @ b) / (na * nb)))


def _code_bytes(c, op: str) -> np.ndarray:
    if isinstance(c, BinaryCode):
        return c.as_array()
    arr = np.asarray(c)
    if arr.dtype != np.uint8:
        raise LengthMismatch(op, f"expected packed uint8 code, got {arr.dtype}")
    return arr.ravel()


def hamming_distance(a, b) -> int:
    """Number of differing bits between two equal-length codes."""
    op = "metrics.hamming_distance"
    x, y = _code_bytes(a, op), _code_bytes(b, op)
    if x.size != y.size:
        raise LengthMismatch(op, f"code lengths differ: {8 * x.size} vs {8 * y.size} bits")
    return int(np.bitwise_count(x ^ y).sum())


def binarize(v) -> BinaryCode:
    """Sign-quantise a vector: bit i is set iff ``v[i] > 0``; MSB of byte 0 is component 0."""
    v = as_embedding(v, "metrics.binarize")
    if v.size % 8:
        raise DimNotByteAligned("metrics.binarize", f"dim {v.size} is not a multiple of 8")
    return BinaryCode(nbits=v.size, bits=np.packbits(v > 0).tobytes())


def binarize_matrix(m) -> np.ndarray:
    """Row-wise :func:`binarize`, returning an (n, dim/8) uint8 matrix."""
    m = np.asarray(m, dtype=np.float32)
    if m.ndim != 2:
        raise DimMismatch("metrics.binarize", f"expected an (n, dim) matrix, got shape {m.shape}")
    if m.shape[1] % 8:
        raise DimNotByteAligned("metrics.binarize", f"dim {m.shape[1]} is not a multiple of 8")
    return np.packbits(m > 0, axis=1)


# -----------------------------------------------------------------------------
# Row kernels
# -----------------------------------------------------------------------------


@numba.njit(cache=True, inline="always")
def popcount64(x):
    x = np.uint64(x)
    x = x - ((x >> np.uint64(1)) & np.uint64(0x5555555555555555))
    x = (x & np.uint64(0x3333333333333333)) + ((x >> np.uint64(2)) & np.uint64(0x3333333333333333))
    x = (x + (x >> np.uint64(4))) & np.uint64(0x0F0F0F0F0F0F0F0F)
    return (x * np.uint64(0x0101010101010101)) >> np.uint64(56)


@numba.njit(cache=True)
def _hamming_scan(words, q):
    n, w = words.shape
    out = np.empty(n, np.int64)
    for i in range(n):
        s = 0
        for j in range(w):
            s += popcount64(words[i, j] ^ q[j])
        out[i] = s
    return out


def hamming_to_rows(codes: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Hamming distance from packed code ``q`` to every row of ``codes`` (int64)."""
    codes = np.ascontiguousarray(codes, dtype=np.uint8)
    q = np.ascontiguousarray(q, dtype=np.uint8)
    if codes.shape[0] == 0:
        return np.zeros(0, np.int64)
    if codes.shape[1] % 8 == 0:
        return _hamming_scan(codes.view(np.uint64), q.view(np.uint64))
    return _hamming_scan(codes, q)


def exact_to_rows(rows: np.ndarray, q: np.ndarray, metric: MetricKind) -> np.ndarray:
    """Reported float64 distances from ``q`` to each row.

    L2 is the true Euclidean distance, inner product is negated, and cosine is
    ``0.5 * |a - b|^2`` over the stored unit rows (i.e. ``1 - cos``).
    """
    r = rows.astype(np.float64)
    q = q.astype(np.float64)
    if metric is MetricKind.INNER_PRODUCT:
        return -(r * q).sum(axis=1)
    diff = r - q
    sq = (diff * diff).sum(axis=1)
    if metric is MetricKind.L2:
        return np.sqrt(sq)
    return 0.5 * sq


def screen_to_rows(
    rows: np.ndarray, sq_norms: np.ndarray, q: np.ndarray, metric: MetricKind
) -> tuple[np.ndarray, float]:
    """Cheap float32-BLAS ranking scores plus an absolute bound on their error.

    Scores rank like the squared reported distance (L2), half of it (cosine) or
    the negated inner product. Any row whose true score is within the returned
    bound of another row's may be misordered by the screen, so callers must
    re-score the band with :func:`exact_to_rows`.
    """
    d = rows.shape[1]
    ip = (rows @ q).astype(np.float64)
    q64 = q.astype(np.float64)
    qn = float(q64 @ q64)
    # |fl(x.q) - x.q| <= gamma_d |x||q| for any summation order, u = 2^-24
    gamma = d * 2.0**-24 / (1.0 - d * 2.0**-24)
    max_norm = math.sqrt(float(sq_norms.max())) if sq_norms.size else 0.0
    ip_err = gamma * max_norm * math.sqrt(qn)
    if metric is MetricKind.INNER_PRODUCT:
        scores = -ip
        err = ip_err
    else:
        scores = sq_norms + qn - 2.0 * ip
        err = 2.0 * ip_err
        if metric is MetricKind.COSINE:
            scores *= 0.5
            err *= 0.5
    # float64 rounding of the combination and of the stored norms
    err += 1e-12 * (float(np.abs(scores).max()) + qn + max_norm**2) + 1e-300
    return scores, err
