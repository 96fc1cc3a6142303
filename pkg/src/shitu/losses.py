"""Metric-learning losses with closed-form gradients.

Every loss returns a :class:`LossBundle`: the scalar value and a gradient for
each differentiable input, keyed by input name. All arithmetic is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import BadAlpha, BadLabel, ShapeMismatch, ZeroFeature

# cos(theta) is kept this far inside [-1, 1] wherever d(theta)/d(cos) is needed
COS_EPS = 1e-7


@dataclass
class LossBundle:
    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def scaled(self, factor: float) -> "LossBundle":
        return LossBundle(self.value * factor, {k: g * factor for k, g in self.grads.items()})

    def renamed(self, mapping: dict[str, str]) -> "LossBundle":
        return LossBundle(self.value, {mapping.get(k, k): g for k, g in self.grads.items()})

    def __add__(self, other: "LossBundle") -> "LossBundle":
        grads = {k: g.copy() for k, g in self.grads.items()}
        for k, g in other.grads.items():
            grads[k] = grads[k] + g if k in grads else g.copy()
        return LossBundle(self.value + other.value, grads)


# -----------------------------------------------------------------------------
# Softmax helpers
# -----------------------------------------------------------------------------


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. ``logits``.

    Uses ``lse = max + log1p(sum of the other exps)`` so a confidently correct
    row keeps full relative precision on its (tiny) loss.
    """
    z = np.asarray(logits, dtype=np.float64)
    n = z.shape[0]
    rows = np.arange(n)
    top = z.argmax(axis=1)
    zmax = z[rows, top]
    e = np.exp(z - zmax[:, None])
    e_rest = e.copy()
    e_rest[rows, top] = 0.0
    per_row = (zmax - z[rows, labels]) + np.log1p(e_rest.sum(axis=1))
    grad = e / e.sum(axis=1, keepdims=True)
    grad[rows, labels] -= 1.0
    return float(per_row.mean()), grad / n


# -----------------------------------------------------------------------------
# Cosine head
# -----------------------------------------------------------------------------


def _normalize(x: np.ndarray, err) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise err
    return x / norms[:, None], norms


def _normalize_backward(g: np.ndarray, unit: np.ndarray, norms: np.ndarray) -> np.ndarray:
    return (g - unit * np.einsum("ij,ij->i", unit, g)[:, None]) / norms[:, None]


def cosine_matrix(features, weight) -> tuple[np.ndarray, Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]]:
    """Cosines between every feature row and every class-weight row.

    Returns the (N, n) cosine matrix (clamped to [-1, 1]) and a backward
    function mapping d/dcos to (d/dfeatures, d/dweight).
    """
    x = np.asarray(features, dtype=np.float64)
    w = np.asarray(weight, dtype=np.float64)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch("losses.cosine", f"features {x.shape} vs weight {w.shape}")
    xh, xn = _normalize(x, ZeroFeature("losses.arcmargin_forward", "feature row with zero norm"))
    wh, wn = _normalize(w, ZeroFeature("losses.arcmargin_forward", "class weight with zero norm"))
    raw = xh @ wh.T
    cos = np.clip(raw, -1.0, 1.0)
    inside = (raw > -1.0) & (raw < 1.0)

    def backward(gcos: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        g = np.where(inside, gcos, 0.0)
        gx = _normalize_backward(g @ wh, xh, xn)
        gw = _normalize_backward(g.T @ xh, wh, wn)
        return gx, gw

    return cos, backward


@dataclass
class ArcMarginHead:
    """Class-weight matrix (n_classes x dim) with feature scale ``s`` and angular margin ``m``."""

    weight: np.ndarray
    s: float = 30.0
    m: float = 0.2

    def __post_init__(self) -> None:
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ShapeMismatch("losses.ArcMarginHead", f"weight must be 2-D, got {self.weight.shape}")
        if not self.s > 0:
            raise ValueError(f"losses.ArcMarginHead: scale s must be > 0, got {self.s}")
        if not 0 <= self.m < math.pi / 2:
            raise ValueError(f"losses.ArcMarginHead: margin m must lie in [0, pi/2), got {self.m}")

    @classmethod
    def init(cls, n_classes: int, dim: int, rng: np.random.Generator, s: float = 30.0, m: float = 0.2):
        bound = math.sqrt(6.0 / dim)
        return cls(rng.uniform(-bound, bound, size=(n_classes, dim)), s=s, m=m)

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    def logits(self, features) -> np.ndarray:
        """Margin-free scaled cosine logits (the inference-time head output)."""
        cos, _ = cosine_matrix(features, self.weight)
        return self.s * cos


def margin_target(cos: np.ndarray, m: float) -> tuple[np.ndarray, np.ndarray]:
    """``cos(theta + m)`` for the target class and its derivative w.r.t. ``cos``.

    Past ``theta = pi - m`` the margined value would turn back up, so there the
    penalty falls back to the linear ``cos - m * sin(m)`` (threshold and fallback
    as in the reference ArcFace code).
    """
    cos_m, sin_m = math.cos(m), math.sin(m)
    threshold = math.cos(math.pi - m)
    sin_t = np.sqrt(np.clip(1.0 - cos * cos, 0.0, 1.0))
    phi = cos * cos_m - sin_t * sin_m
    c_in = np.clip(cos, -1.0 + COS_EPS, 1.0 - COS_EPS)
    dphi = cos_m + sin_m * c_in / np.sqrt(1.0 - c_in * c_in)
    use = cos > threshold
    return np.where(use, phi, cos - m * sin_m), np.where(use, dphi, 1.0)


def _check_labels(labels, n_rows: int, n_classes: int, op: str) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n_rows,) or not np.issubdtype(y.dtype, np.integer):
        raise BadLabel(op, f"expected {n_rows} integer labels, got shape {y.shape} dtype {y.dtype}")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise BadLabel(op, f"labels must lie in [0, {n_classes})")
    return y.astype(np.int64)


def arcmargin_forward(features, labels, head: ArcMarginHead) -> LossBundle:
    """Additive angular margin loss; gradients for ``features`` and ``weight``."""
    x = np.asarray(features, dtype=np.float64)
    y = _check_labels(labels, x.shape[0], head.n_classes, "losses.arcmargin_forward")
    cos, backward = cosine_matrix(x, head.weight)
    rows = np.arange(x.shape[0])
    phi, dphi = margin_target(cos[rows, y], head.m)
    logits = head.s * cos
    logits[rows, y] = head.s * phi
    value, glogit = cross_entropy(logits, y)
    gcos = head.s * glogit
    gcos[rows, y] *= dphi
    gx, gw = backward(gcos)
    return LossBundle(value, {"features": gx, "weight": gw})


def scaled_cosine_logits(features, head: ArcMarginHead):
    """Head output ``s * cos`` plus a backward mapping d/dlogits to (d/dfeatures, d/dweight)."""
    cos, backward = cosine_matrix(features, head.weight)
    return head.s * cos, lambda g: backward(head.s * g)


# -----------------------------------------------------------------------------
# Mutual learning
# -----------------------------------------------------------------------------


def dml_loss(student_logits, teacher_logits) -> LossBundle:
    """Symmetrised KL between the softmax outputs, averaged over the batch."""
    a = np.asarray(student_logits, dtype=np.float64)
    b = np.asarray(teacher_logits, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeMismatch("losses.dml_loss", f"logit shapes differ: {a.shape} vs {b.shape}")
    n = a.shape[0]
    lp, lq = log_softmax(a), log_softmax(b)
    p, q = np.exp(lp), np.exp(lq)
    diff_log = lp - lq
    value = 0.5 * float(((p - q) * diff_log).sum()) / n
    gu = 0.5 * (p * diff_log + (p - q))
    gv = 0.5 * (-q * diff_log - (p - q))
    ga = gu - p * gu.sum(axis=1, keepdims=True)
    gb = gv - q * gv.sum(axis=1, keepdims=True)
    return LossBundle(value, {"student": ga / n, "teacher": gb / n})


def feature_loss(student_feat, teacher_feat) -> LossBundle:
    """Mean squared error over all elements."""
    s = np.asarray(student_feat, dtype=np.float64)
    t = np.asarray(teacher_feat, dtype=np.float64)
    if s.shape != t.shape:
        raise ShapeMismatch("losses.feature_loss", f"feature shapes differ: {s.shape} vs {t.shape}")
    diff = s - t
    g = 2.0 * diff / diff.size
    return LossBundle(float((diff * diff).mean()), {"student": g, "teacher": -g})


def udml_total(arc_s: LossBundle, arc_t: LossBundle, dml: LossBundle, feat: LossBundle) -> LossBundle:
    """Sum of both ArcMargin terms, the DML term and the feature term.

    Gradients are re-keyed into one namespace before summing: the two
    ArcMargin bundles and the feature bundle all reach the embedder outputs
    (``student_features`` / ``teacher_features``), DML reaches the head logits.
    """
    parts = [
        arc_s.renamed({"features": "student_features", "weight": "student_weight"}),
        arc_t.renamed({"features": "teacher_features", "weight": "teacher_weight"}),
        dml.renamed({"student": "student_logits", "teacher": "teacher_logits"}),
        feat.renamed({"student": "student_features", "teacher": "teacher_features"}),
    ]
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total


# -----------------------------------------------------------------------------
# Hashing
# -----------------------------------------------------------------------------

DSHSD_ALPHA = 0.05


def dshsd_loss(
    features,
    pair_labels,
    class_labels,
    classifier_weights,
    alpha: float = DSHSD_ALPHA,
    margin: Optional[float] = None,
) -> LossBundle:
    """Hashing loss on tanh-smoothed features.

    ``classification + alpha * contrastive``, where the contrastive term averages
    over pairs ``i < j``: similar pairs pay ``|a_i - a_j|^2`` and dissimilar pairs
    pay ``max(0, margin - |a_i - a_j|^2)``. ``margin`` defaults to twice the
    feature dimension. Gradients for ``features`` and ``classifier``.
    """
    op = "losses.dshsd_loss"
    f = np.asarray(features, dtype=np.float64)
    w = np.asarray(classifier_weights, dtype=np.float64)
    sim = np.asarray(pair_labels, dtype=np.float64)
    if alpha < 0:
        raise BadAlpha(op, f"alpha must be >= 0, got {alpha}")
    if f.ndim != 2:
        raise ShapeMismatch(op, f"features must be (N, d), got {f.shape}")
    n, d = f.shape
    if sim.shape != (n, n):
        raise ShapeMismatch(op, f"pair_labels must be ({n}, {n}), got {sim.shape}")
    if w.ndim != 2 or w.shape[1] != d:
        raise ShapeMismatch(op, f"classifier must be (n_classes, {d}), got {w.shape}")
    y = _check_labels(class_labels, n, w.shape[0], op)
    if margin is None:
        margin = 2.0 * d

    a = np.tanh(f)
    sq = np.einsum("ij,ij->i", a, a)
    dist = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (a @ a.T), 0.0)
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    n_pairs = max(int(upper.sum()), 1)
    similar = upper & (sim > 0.5)
    dissimilar = upper & ~(sim > 0.5)
    active = dissimilar & (dist < margin)
    contrastive = (dist[similar].sum() + (margin - dist[active]).sum()) / n_pairs
    coef = (similar.astype(np.float64) - active.astype(np.float64)) / n_pairs
    coef = coef + coef.T
    ga_con = 2.0 * (coef.sum(axis=1)[:, None] * a - coef @ a)

    cls_value, glogit = cross_entropy(a @ w.T, y)
    ga = glogit @ w + alpha * ga_con
    gw = glogit.T @ a
    gf = ga * (1.0 - a * a)
    return LossBundle(cls_value + alpha * float(contrastive), {"features": gf, "classifier": gw})


def pair_similarity(labels) -> np.ndarray:
    """{0, 1} matrix marking pairs that share a class label."""
    y = np.asarray(labels)
    return (y[:, None] == y[None, :]).astype(np.float64)
