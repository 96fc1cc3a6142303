"""``shitu`` command line: galleries, indices, search, evaluation, benchmarks, training.

Every subcommand accepts ``--config FILE`` (``key=value`` lines, ``#`` comments;
keys are flag names with or without leading dashes) and ``--threads N``
(falls back to ``$SHITU_THREADS``). Explicit flags override the config file.
The resolved configuration is printed to stderr; results go to stdout.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numba
import numpy as np
from threadpoolctl import threadpool_limits

from . import gallery, trainer
from .core import RowCountMismatch, ShituError
from .evaluation import index_recall, run_bench
from .metrics import binarize_matrix

METRICS = ("l2", "ip", "cosine", "hamming")
INDEX_KINDS = ("flat", "ivf", "hnsw")


# -----------------------------------------------------------------------------
# Argument parsing
# -----------------------------------------------------------------------------


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="key=value file; flags override it")
    p.add_argument("--threads", type=_positive_int, help="worker cap (default: $SHITU_THREADS)")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shitu", description="Labelled vector retrieval toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()

    p = sub.add_parser("build", parents=[common], help="build and save an index from a feature file")
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--csv", action="store_true", help="features are CSV floats")
    p.add_argument("--index", choices=INDEX_KINDS, default="flat")
    p.add_argument("--metric", choices=METRICS, help="default: cosine (float) / hamming (binary)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--nlist", type=_positive_int, help="IVF cells (default: round(sqrt(n)))")
    p.add_argument("--nprobe-default", type=_positive_int, default=1)
    p.add_argument("--M", dest="M", type=_positive_int, default=32)
    p.add_argument("--ef-construction", type=_positive_int, default=200)
    p.add_argument("--ef-search", type=_positive_int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("search", parents=[common], help="top-k search; TSV on stdout")
    p.add_argument("--index-file", type=Path, required=True)
    p.add_argument("--query-features", type=Path, required=True)
    p.add_argument("--csv", action="store_true")
    p.add_argument("--k", type=_positive_int, default=10)
    p.add_argument("--nprobe", type=_positive_int)
    p.add_argument("--ef-search", type=_positive_int)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", parents=[common], help="recall@1..k of labelled queries")
    p.add_argument("--index-file", type=Path, required=True)
    p.add_argument("--query-features", type=Path, required=True)
    p.add_argument("--query-labels", type=Path, required=True)
    p.add_argument("--csv", action="store_true")
    p.add_argument("--k", type=_positive_int, default=5)
    p.add_argument("--nprobe", type=_positive_int)
    p.add_argument("--ef-search", type=_positive_int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="search latency on a seeded random gallery")
    p.add_argument("--gallery-size", type=_positive_int, default=100_000)
    p.add_argument("--dim", type=_positive_int, default=512)
    p.add_argument("--payload", choices=("float", "binary", "both"), default="both")
    p.add_argument("--index", choices=INDEX_KINDS, default="flat")
    p.add_argument("--queries", type=_positive_int, default=10)
    p.add_argument("--repeats", type=_positive_int, default=5)
    p.add_argument("--k", type=_positive_int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train", parents=[common], help="train a toy embedder")
    p.add_argument("--mode", choices=trainer.MODES, default="baseline")
    p.add_argument("--epochs", type=_nonneg_int, default=50)
    p.add_argument("--batch-size", type=_positive_int, default=128)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--lr-schedule", choices=("constant", "cosine"), default="constant")
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--embedding-dim", type=_positive_int, default=64)
    p.add_argument("--hidden-dim", type=_nonneg_int, default=64, help="0 for a single linear layer")
    p.add_argument("--scale", type=float, default=30.0)
    p.add_argument("--margin", type=float, default=0.2)
    p.add_argument("--alpha", type=float, default=trainer.DSHSD_ALPHA, help="hashing contrastive weight")
    p.add_argument("--features", type=Path, help="train on this feature file instead of synthetic blobs")
    p.add_argument("--labels", type=Path)
    _synthetic_flags(p)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--history", type=Path, help="loss CSV (default: <out>.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", parents=[common], help="map features through a trained checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--csv", action="store_true")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("quantize", parents=[common], help="sign-binarise a float feature file")
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--csv", action="store_true")
    p.add_argument("--checkpoint", type=Path, help="embed through this checkpoint first")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("delete", parents=[common], help="remove records from a saved index")
    p.add_argument("--index-file", type=Path, required=True)
    p.add_argument("--ids", required=True, help="comma-separated record ids")
    p.add_argument("--out", type=Path, help="default: overwrite --index-file")
    p.set_defaults(func=cmd_delete)

    p = sub.add_parser("synth", parents=[common], help="write synthetic gallery/query feature files")
    _synthetic_flags(p)
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def _synthetic_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--classes", type=_positive_int, default=8)
    p.add_argument("--input-dim", type=_positive_int, default=3)
    p.add_argument("--per-class", type=_positive_int, default=100, help="training points per class")
    p.add_argument("--gallery-per-class", type=_positive_int, default=20)
    p.add_argument("--query-per-class", type=_positive_int, default=20)
    p.add_argument("--spread", type=float, default=10.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--data-seed", type=int, default=0)


def read_config_file(path: Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.lstrip("-")] = value
    return values


def _subparser_choices(parser: argparse.ArgumentParser) -> dict[str, argparse.ArgumentParser]:
    for action in parser._actions:  # noqa: SLF001
        if isinstance(action, argparse._SubParsersAction):  # noqa: SLF001
            return action.choices
    return {}


def _config_path(argv: list[str]) -> Optional[str]:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Parse flags; a ``--config`` file supplies values for flags not given explicitly."""
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    config = _config_path(argv)
    command = argv[0] if argv else None
    if config is None or command not in _subparser_choices(parser):
        return parser.parse_args(argv)
    sub = _subparser_choices(parser)[command]
    by_flag = {}
    for action in sub._actions:  # noqa: SLF001 - argparse has no public accessor
        for opt in action.option_strings:
            by_flag[opt.lstrip("-")] = action
            by_flag[opt.lstrip("-").replace("-", "_")] = action
    try:
        entries = read_config_file(Path(config))
    except OSError as exc:
        parser.error(f"cannot read config {config}: {exc.strerror}")
    except ValueError as exc:
        parser.error(str(exc))
    prefix: list[str] = []
    for key, value in entries.items():
        action = by_flag.get(key)
        if action is None or key in ("config", "help", "h"):
            parser.error(f"unknown config key {key!r} for '{command}'")
        flag = action.option_strings[-1]
        if action.nargs == 0:
            if value.lower() in ("1", "true", "yes", "on"):
                prefix.append(flag)
            elif value.lower() not in ("0", "false", "no", "off"):
                parser.error(f"config key {key!r} expects a boolean, got {value!r}")
        else:
            prefix.extend([flag, value])
    # config values go first so explicit flags, parsed later, win
    return parser.parse_args([command] + prefix + argv[1:])


def resolved_threads(args: argparse.Namespace) -> Optional[int]:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("SHITU_THREADS", "").strip()
    if not env:
        return None
    try:
        n = int(env)
    except ValueError:
        raise ValueError(f"SHITU_THREADS must be a positive integer, got {env!r}") from None
    if n < 1:
        raise ValueError(f"SHITU_THREADS must be a positive integer, got {env!r}")
    return n


def print_config(args: argparse.Namespace, threads: Optional[int]) -> None:
    skip = {"func", "config", "threads"}
    items = {k: v for k, v in vars(args).items() if k not in skip}
    items["threads"] = threads if threads is not None else "default"
    for k in sorted(items):
        print(f"# {k}={items[k]}", file=sys.stderr)


# -----------------------------------------------------------------------------
# Commands
# -----------------------------------------------------------------------------


def _query_rows(index, path: Path, csv_format: bool) -> np.ndarray:
    rows = gallery.read_features(path, csv_format=csv_format)
    if index.metric.is_binary and rows.dtype != np.uint8:
        rows = binarize_matrix(rows)
    return rows


def _search_params(index, args) -> dict:
    params = {}
    if getattr(args, "nprobe", None) is not None:
        if index.kind != "ivf":
            raise ValueError(f"--nprobe only applies to ivf indices, not {index.kind}")
        params["nprobe"] = args.nprobe
    if getattr(args, "ef_search", None) is not None:
        if index.kind != "hnsw":
            raise ValueError(f"--ef-search only applies to hnsw indices, not {index.kind}")
        params["ef_search"] = args.ef_search
    return params


def cmd_build(args) -> int:
    t0 = time.perf_counter()
    store = gallery.ingest(args.features, args.labels, csv_format=args.csv)
    params: dict = {}
    if args.index == "ivf":
        params = {"nlist": args.nlist, "nprobe": args.nprobe_default, "seed": args.seed}
    elif args.index == "hnsw":
        params = {
            "M": args.M,
            "ef_construction": args.ef_construction,
            "ef_search": args.ef_search,
            "seed": args.seed,
        }
    index = store.build_index(args.index, args.metric, **params)
    build_s = time.perf_counter() - t0
    size = gallery.save(index, args.out)
    print(f"records\t{len(index)}")
    print(f"build_seconds\t{build_s:.3f}")
    print(f"file_bytes\t{size}")
    return 0


def cmd_search(args) -> int:
    index = gallery.load_index(args.index_file)
    queries = _query_rows(index, args.query_features, args.csv)
    params = _search_params(index, args)
    out = sys.stdout
    for row, q in enumerate(queries):
        for rank, r in enumerate(index.search(q, args.k, **params), start=1):
            out.write(f"{row}\t{rank}\t{r.id}\t{r.label}\t{r.distance!r}\n")
    return 0


def cmd_eval(args) -> int:
    index = gallery.load_index(args.index_file)
    queries = _query_rows(index, args.query_features, args.csv)
    labels = gallery.read_labels(args.query_labels)
    if len(labels) != len(queries):
        raise RowCountMismatch(
            "cli.eval", f"{args.query_features} has {len(queries)} rows but {args.query_labels} has {len(labels)} labels"
        )
    recalls = index_recall(index, queries, labels, args.k, **_search_params(index, args))
    print(f"queries\t{len(queries)}")
    for k, v in recalls.items():
        print(f"recall@{k}\t{v:.6f}")
    return 0


def cmd_bench(args) -> int:
    payloads = ("float", "binary") if args.payload == "both" else (args.payload,)
    reports = {}
    for payload in payloads:
        rep = run_bench(
            args.gallery_size,
            args.dim,
            payload=payload,
            index=args.index,
            n_queries=args.queries,
            repeats=args.repeats,
            k=args.k,
            seed=args.seed,
        )
        reports[payload] = rep
        lat = rep.latency
        print(
            f"{payload}\t{rep.index}\tn={rep.gallery_size}\tdim={rep.dim}\tindex_bytes={rep.payload_bytes}"
            f"\tbuild_s={rep.build_seconds:.3f}\tmean_ms={lat.mean_ms:.4f}\tp50_ms={lat.p50_ms:.4f}"
            f"\tp99_ms={lat.p99_ms:.4f}\trepeats={len(lat.samples_ms)}"
        )
    if len(reports) == 2:
        f, b = reports["float"], reports["binary"]
        print(f"speed_ratio\t{f.latency.mean_ms / b.latency.mean_ms:.2f}")
        print(f"bytes_ratio\t{f.payload_bytes / b.payload_bytes:.2f}")
    return 0


def _dataset(args) -> trainer.SyntheticDataset:
    return trainer.SyntheticDataset.generate(
        n_classes=args.classes,
        input_dim=args.input_dim,
        train_per_class=args.per_class,
        gallery_per_class=args.gallery_per_class,
        query_per_class=args.query_per_class,
        spread=args.spread,
        noise=args.noise,
        seed=args.data_seed,
    )


def cmd_train(args) -> int:
    config = trainer.TrainConfig(
        mode=args.mode,
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        lr_schedule=args.lr_schedule,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        seed=args.seed,
        embedding_dim=args.embedding_dim,
        hidden_dim=args.hidden_dim or None,
        scale=args.scale,
        margin=args.margin,
        dshsd_alpha=args.alpha,
    )
    if args.features is not None:
        if args.labels is None:
            raise ValueError("--features requires --labels")
        x = gallery.read_features(args.features)
        raw = gallery.read_labels(args.labels)
        if len(raw) != len(x):
                raise RowCountMismatch("trainer.train", f"{len(x)} feature rows but {len(raw)} labels")
        names = sorted(set(raw))
        y = np.array([names.index(v) for v in raw], dtype=np.int64)
        data = trainer.SyntheticDataset(len(names), x.astype(np.float64), y, x[:0], y[:0], x[:0], y[:0], np.zeros(0))
    else:
        data = _dataset(args)
    result = trainer.train(config, data)
    trainer.save_checkpoint(args.out, result.networks)
    history = args.history or args.out.with_suffix(args.out.suffix + ".csv")
    trainer.write_history_csv(history, result)
    print(f"checkpoint\t{args.out}")
    print(f"history\t{history}")
    print(f"initial_total\t{result.initial['total']!r}")
    print(f"final_total\t{result.final['total']!r}")
    if len(data.gallery_x) and len(data.query_x):
        binary = config.mode == "dshsd"
        for i, net in enumerate(result.networks):
            print(f"recall@1_net{i}\t{trainer.evaluate_recall(net.embedder, data, 1):.6f}")
            if binary:
                print(f"recall@1_net{i}_binary\t{trainer.evaluate_recall(net.embedder, data, 1, binary=True):.6f}")
    return 0


def _embedded(checkpoint: Path, features: Path, csv_format: bool) -> np.ndarray:
    nets = trainer.load_checkpoint(checkpoint)
    x = gallery.read_features(features, csv_format=csv_format)
    return nets[0].embed(x).astype(np.float32)


def cmd_embed(args) -> int:
    e = _embedded(args.checkpoint, args.features, args.csv)
    gallery.write_features(args.out, e)
    print(f"rows\t{len(e)}\ndim\t{e.shape[1]}")
    return 0


def cmd_quantize(args) -> int:
    if args.checkpoint is not None:
        x = _embedded(args.checkpoint, args.features, args.csv)
    else:
        x = gallery.read_features(args.features, csv_format=args.csv)
    codes = binarize_matrix(x)
    gallery.write_features(args.out, codes)
    print(f"rows\t{len(codes)}\nnbits\t{codes.shape[1] * 8}\nbytes_in\t{x.astype(np.float32).nbytes}")
    print(f"bytes_out\t{codes.nbytes}")
    return 0


def cmd_delete(args) -> int:
    try:
        ids = [int(s) for s in args.ids.split(",") if s.strip()]
    except ValueError:
        raise ValueError(f"--ids must be comma-separated integers, got {args.ids!r}") from None
    index = gallery.load_index(args.index_file)
    removed = index.delete(ids)
    gallery.save(index, args.out or args.index_file)
    print(f"removed\t{removed}\nremaining\t{len(index)}")
    return 0


def cmd_synth(args) -> int:
    data = _dataset(args)
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    splits = {
        "train": (data.train_x, data.train_y),
        "gallery": (data.gallery_x, data.gallery_y),
        "query": (data.query_x, data.query_y),
    }
    for name, (x, y) in splits.items():
        gallery.write_features(out / f"{name}.ppsg", x.astype(np.float32))
        gallery.write_labels(out / f"{name}_labels.txt", [f"class{v}" for v in y])
        print(f"{name}\t{len(x)}")
    return 0


# -----------------------------------------------------------------------------
# Entry point
# -----------------------------------------------------------------------------


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    try:
        threads = resolved_threads(args)
    except ValueError as exc:
        print(f"error: cli: {exc}", file=sys.stderr)
        return 2
    print_config(args, threads)
    if threads is not None:
        numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except ShituError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: cli.{args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
