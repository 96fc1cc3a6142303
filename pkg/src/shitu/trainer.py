"""Desk-scale training of toy embedders on synthetic labelled clusters.

Modes:

* ``baseline`` - one embedder + ArcMargin head
* ``dml``      - two identically shaped networks, ArcMargin on both + symmetric KL
* ``udml``     - ``dml`` plus an MSE term between the two embedder outputs
* ``dshsd``    - one embedder trained with the hashing loss; sign codes at inference

Both networks in the mutual modes are updated together from one combined
backward pass. Batch order depends only on ``TrainConfig.seed``; network
initialisation uses ``TrainConfig.net_seeds``.
"""

from __future__ import annotations

import csv
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .core import BadHeader, ChecksumMismatch, DivergenceDetected, MetricKind, Truncated, VersionMismatch
from .evaluation import label_recall
from .index import FlatIndex
from .losses import (
    DSHSD_ALPHA,
    ArcMarginHead,
    LossBundle,
    arcmargin_forward,
    dml_loss,
    dshsd_loss,
    feature_loss,
    pair_similarity,
    scaled_cosine_logits,
    udml_total,
)
from .metrics import binarize_matrix

MODES = ("baseline", "dml", "udml", "dshsd")


# -----------------------------------------------------------------------------
# Model
# -----------------------------------------------------------------------------


class ToyEmbedder:
    """Dense layers with bias and ReLU between them; the last layer is linear."""

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]) -> None:
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]

    @classmethod
    def init(cls, input_dim: int, embedding_dim: int, hidden_dim: Optional[int], rng: np.random.Generator):
        dims = [input_dim] + ([hidden_dim] if hidden_dim else []) + [embedding_dim]
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = math.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @property
    def embedding_dim(self) -> int:
        return self.weights[-1].shape[1]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        acts = [np.asarray(x, dtype=np.float64)]
        h = acts[0]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, acts

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, acts: list[np.ndarray], g: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
        gw: list[np.ndarray] = [np.empty(0)] * len(self.weights)
        gb: list[np.ndarray] = [np.empty(0)] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            gw[i] = acts[i].T @ g
            gb[i] = g.sum(axis=0)
            if i > 0:
                g = (g @ self.weights[i].T) * (acts[i] > 0)
        return gw, gb


@dataclass
class Network:
    """Embedder plus its training head (ArcMargin head, or a hashing classifier)."""

    embedder: ToyEmbedder
    head: ArcMarginHead

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.embedder.weights, self.embedder.biases)):
            out[f"layer{i}.weight"] = w
            out[f"layer{i}.bias"] = b
        out["head.weight"] = self.head.weight
        return out

    def embed(self, x) -> np.ndarray:
        return self.embedder(x)


# -----------------------------------------------------------------------------
# Optimiser
# -----------------------------------------------------------------------------


class SGDMomentum:
    """Heavy-ball SGD: ``v = momentum * v + (g + wd * w)``; ``w -= lr * v`` (in place)."""

    def __init__(self, params: dict[str, np.ndarray], momentum: float = 0.9, weight_decay: float = 0.0) -> None:
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(p) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        for k, p in self.params.items():
            g = grads[k]
            if self.weight_decay:
                g = g + self.weight_decay * p
            v = self.velocity[k]
            v *= self.momentum
            v += g
            p -= lr * v


# -----------------------------------------------------------------------------
# Data
# -----------------------------------------------------------------------------


@dataclass
class SyntheticDataset:
    """Gaussian class blobs with disjoint train / gallery / query draws."""

    n_classes: int
    train_x: np.ndarray
    train_y: np.ndarray
    gallery_x: np.ndarray
    gallery_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    means: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.train_x.shape[1]

    @classmethod
    def generate(
        cls,
        n_classes: int = 8,
        input_dim: int = 3,
        train_per_class: int = 100,
        gallery_per_class: int = 20,
        query_per_class: int = 20,
        spread: float = 10.0,
        noise: float = 1.0,
        seed: int = 0,
    ) -> "SyntheticDataset":
        rng = np.random.default_rng(seed)
        means = rng.normal(0.0, spread, size=(n_classes, input_dim))

        def draw(per_class: int) -> tuple[np.ndarray, np.ndarray]:
            y = np.repeat(np.arange(n_classes), per_class)
            x = means[y] + rng.normal(0.0, noise, size=(len(y), input_dim))
            return x, y

        tx, ty = draw(train_per_class)
        gx, gy = draw(gallery_per_class)
        qx, qy = draw(query_per_class)
        return cls(n_classes, tx, ty, gx, gy, qx, qy, means)


def standard_dataset(seed: int = 0) -> SyntheticDataset:
    """The overlapping-cluster benchmark used for the distillation comparison."""
    return SyntheticDataset.generate(
        n_classes=20,
        input_dim=16,
        train_per_class=60,
        gallery_per_class=10,
        query_per_class=20,
        spread=1.0,
        noise=1.0,
        seed=seed,
    )


# -----------------------------------------------------------------------------
# Training
# -----------------------------------------------------------------------------


@dataclass
class TrainConfig:
    mode: str = "baseline"
    epochs: int = 50
    batch_size: int = 128
    lr: float = 0.01
    lr_schedule: str = "constant"
    momentum: float = 0.9
    weight_decay: float = 1e-5
    seed: int = 0
    net_seeds: Optional[tuple[int, int]] = None
    embedding_dim: int = 64
    hidden_dim: Optional[int] = 64
    scale: float = 30.0
    margin: float = 0.2
    dshsd_alpha: float = DSHSD_ALPHA
    dshsd_margin: Optional[float] = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"trainer.train: mode must be one of {MODES}, got {self.mode!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"trainer.train: lr_schedule must be constant or cosine, got {self.lr_schedule!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("trainer.train: epochs >= 0, batch_size >= 1 and lr >= 0 are required")
        if self.net_seeds is not None:
            self.net_seeds = tuple(int(s) for s in self.net_seeds)

    @property
    def seeds(self) -> tuple[int, int]:
        return self.net_seeds if self.net_seeds is not None else (self.seed, self.seed + 1)

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "cosine" and self.epochs > 0:
            return 0.5 * self.lr * (1.0 + math.cos(math.pi * epoch / self.epochs))
        return self.lr


def history_columns(mode: str) -> list[str]:
    return {
        "baseline": ["epoch", "arc", "total"],
        "dml": ["epoch", "arc_s", "arc_t", "arc", "dml", "total"],
        "udml": ["epoch", "arc_s", "arc_t", "arc", "dml", "feat", "total"],
        "dshsd": ["epoch", "dshsd", "total"],
    }[mode]


@dataclass
class TrainResult:
    config: TrainConfig
    networks: list[Network]
    history: list[dict[str, float]] = field(default_factory=list)
    initial: dict[str, float] = field(default_factory=dict)
    final: dict[str, float] = field(default_factory=dict)

    @property
    def network(self) -> Network:
        """The deployed network (the first one in mutual modes)."""
        return self.networks[0]


def build_networks(config: TrainConfig, input_dim: int, n_classes: int) -> list[Network]:
    count = 2 if config.mode in ("dml", "udml") else 1
    nets = []
    for seed in config.seeds[:count]:
        rng = np.random.default_rng(seed)
        emb = ToyEmbedder.init(input_dim, config.embedding_dim, config.hidden_dim, rng)
        head = ArcMarginHead.init(n_classes, config.embedding_dim, rng, s=config.scale, m=config.margin)
        nets.append(Network(emb, head))
    return nets


def _net_grads(net: Network, acts, g_emb: np.ndarray, g_head: np.ndarray) -> dict[str, np.ndarray]:
    gw, gb = net.embedder.backward(acts, g_emb)
    out = {}
    for i in range(len(gw)):
        out[f"layer{i}.weight"] = gw[i]
        out[f"layer{i}.bias"] = gb[i]
    out["head.weight"] = g_head
    return out


def batch_step(config: TrainConfig, nets: list[Network], x: np.ndarray, y: np.ndarray):
    """Loss components and per-network parameter gradients for one batch."""
    if config.mode == "baseline":
        net = nets[0]
        e, acts = net.embedder.forward(x)
        arc = arcmargin_forward(e, y, net.head)
        grads = [_net_grads(net, acts, arc.grads["features"], arc.grads["weight"])]
        return {"arc": arc.value, "total": arc.value}, grads

    if config.mode == "dshsd":
        net = nets[0]
        e, acts = net.embedder.forward(x)
        loss = dshsd_loss(
            e, pair_similarity(y), y, net.head.weight, alpha=config.dshsd_alpha, margin=config.dshsd_margin
        )
        grads = [_net_grads(net, acts, loss.grads["features"], loss.grads["classifier"])]
        return {"dshsd": loss.value, "total": loss.value}, grads

    s_net, t_net = nets
    es, acts_s = s_net.embedder.forward(x)
    et, acts_t = t_net.embedder.forward(x)
    arc_s = arcmargin_forward(es, y, s_net.head)
    arc_t = arcmargin_forward(et, y, t_net.head)
    zs, back_s = scaled_cosine_logits(es, s_net.head)
    zt, back_t = scaled_cosine_logits(et, t_net.head)
    dml = dml_loss(zs, zt)
    if config.mode == "udml":
        feat = feature_loss(es, et)
    else:
        feat = LossBundle(0.0, {"student": np.zeros_like(es), "teacher": np.zeros_like(et)})
    total = udml_total(arc_s, arc_t, dml, feat)
    g = total.grads
    gx_s, gw_s = back_s(g["student_logits"])
    gx_t, gw_t = back_t(g["teacher_logits"])
    grads = [
        _net_grads(s_net, acts_s, g["student_features"] + gx_s, g["student_weight"] + gw_s),
        _net_grads(t_net, acts_t, g["teacher_features"] + gx_t, g["teacher_weight"] + gw_t),
    ]
    parts = {
        "arc_s": arc_s.value,
        "arc_t": arc_t.value,
        "arc": arc_s.value + arc_t.value,
        "dml": dml.value,
        "total": total.value,
    }
    if config.mode == "udml":
        parts["feat"] = feat.value
    return parts, grads


def dataset_loss(config: TrainConfig, nets: list[Network], x: np.ndarray, y: np.ndarray) -> dict[str, float]:
    """Loss components over a whole split (no update)."""
    parts, _ = batch_step(config, nets, x, y)
    return parts


def train(config: TrainConfig, dataset: SyntheticDataset) -> TrainResult:
    nets = build_networks(config, dataset.input_dim, dataset.n_classes)
    opts = [SGDMomentum(n.params(), config.momentum, config.weight_decay) for n in nets]
    result = TrainResult(config, nets)
    result.initial = dataset_loss(config, nets, dataset.train_x, dataset.train_y)
    order_rng = np.random.default_rng(config.seed)
    n = len(dataset.train_x)
    cols = history_columns(config.mode)[1:]
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        perm = order_rng.permutation(n)
        sums = dict.fromkeys(cols, 0.0)
        seen = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                parts, grads = batch_step(config, nets, dataset.train_x[idx], dataset.train_y[idx])
                if not all(math.isfinite(v) for v in parts.values()):
                    raise DivergenceDetected(
                        "trainer.train",
                        f"non-finite loss at epoch {epoch + 1}, batch starting {start}: {parts} (lr={lr})",
                    )
                for opt, g in zip(opts, grads):
                    opt.step(g, lr)
            for n_i, opt in enumerate(opts):
                bad = [k for k, p in opt.params.items() if not np.all(np.isfinite(p))]
                if bad:
                    raise DivergenceDetected(
                        "trainer.train",
                        f"non-finite weights {bad} in network {n_i} at epoch {epoch + 1} (lr={lr})",
                    )
            for c in cols:
                sums[c] += parts[c] * len(idx)
            seen += len(idx)
        row = {"epoch": epoch + 1}
        row.update({c: sums[c] / seen for c in cols})
        result.history.append(row)
    result.final = dataset_loss(config, nets, dataset.train_x, dataset.train_y)
    return result


# -----------------------------------------------------------------------------
# Evaluation
# -----------------------------------------------------------------------------


def embed_gallery_index(embedder: ToyEmbedder, x, labels, binary: bool = False) -> FlatIndex:
    e = embedder(x).astype(np.float32)
    if binary:
        index = FlatIndex(e.shape[1], MetricKind.HAMMING)
        index.add_arrays(np.arange(len(e)), binarize_matrix(e), [str(v) for v in labels])
    else:
        index = FlatIndex(e.shape[1], MetricKind.COSINE)
        index.add_arrays(np.arange(len(e)), e, [str(v) for v in labels])
    return index


def evaluate_recall(embedder: ToyEmbedder, dataset: SyntheticDataset, k: int = 1, binary: bool = False) -> float:
    """recall@k of query embeddings against gallery embeddings.

    Cosine Flat search by default; ``binary=True`` searches sign codes under
    Hamming distance instead.
    """
    index = embed_gallery_index(embedder, dataset.gallery_x, dataset.gallery_y, binary)
    q = embedder(dataset.query_x).astype(np.float32)
    if binary:
        q = binarize_matrix(q)
    retrieved = [[r.label for r in index.search(row, k)] for row in q]
    return label_recall([str(v) for v in dataset.query_y], retrieved, k)


# -----------------------------------------------------------------------------
# Persistence
# -----------------------------------------------------------------------------

CKPT_MAGIC = b"PPSC"
CKPT_VERSION = 1


def save_checkpoint(path: Union[str, Path], networks: Sequence[Network]) -> None:
    """Versioned binary: named float64 arrays (shape + data), CRC32 trailer."""
    arrays: dict[str, np.ndarray] = {}
    for n_i, net in enumerate(networks):
        for name, arr in net.params().items():
            arrays[f"net{n_i}.{name}"] = arr
        arrays[f"net{n_i}.head.scale_margin"] = np.array([net.head.s, net.head.m])
    body = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        body.append(struct.pack("<H", len(raw)) + raw)
        body.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        body.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    payload = b"".join(body)
    Path(path).write_bytes(
        CKPT_MAGIC + struct.pack("<I", CKPT_VERSION) + payload + struct.pack("<I", zlib.crc32(payload))
    )


def load_checkpoint(path: Union[str, Path]) -> list[Network]:
    buf = Path(path).read_bytes()
    op = "trainer.load_checkpoint"
    if len(buf) < 12:
        raise Truncated(op, "file too short")
    if buf[:4] != CKPT_MAGIC:
        raise BadHeader(op, f"bad magic {buf[:4]!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CKPT_VERSION:
        raise VersionMismatch(op, f"checkpoint version {version}, expected {CKPT_VERSION}")
    payload = buf[8:-4]
    if zlib.crc32(payload) != struct.unpack_from("<I", buf, len(buf) - 4)[0]:
        raise ChecksumMismatch(op, "checkpoint CRC32 mismatch")
    (count,) = struct.unpack_from("<I", payload)
    pos = 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", payload, pos)
        pos += 2
        name = payload[pos : pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<B", payload, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", payload, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(payload, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    nets = []
    n_i = 0
    while f"net{n_i}.head.weight" in arrays:
        prefix = f"net{n_i}."
        n_layers = sum(1 for k in arrays if k.startswith(prefix + "layer") and k.endswith(".weight"))
        emb = ToyEmbedder(
            [arrays[f"{prefix}layer{i}.weight"] for i in range(n_layers)],
            [arrays[f"{prefix}layer{i}.bias"] for i in range(n_layers)],
        )
        s, m = arrays[f"{prefix}head.scale_margin"]
        nets.append(Network(emb, ArcMarginHead(arrays[f"{prefix}head.weight"], s=float(s), m=float(m))))
        n_i += 1
    return nets


def write_history_csv(path: Union[str, Path], result: TrainResult) -> None:
    cols = history_columns(result.config.mode)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in result.history:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in cols[1:]])
