"""``recal`` command line: train, predict, evaluate, kmeans, segment.

A run can be described by a flat ``key=value`` file passed with
``--config``; keys are the long flag names (dashes or underscores) and
flags given on the command line win over the file. Every command writes
``config.txt`` next to its outputs, which replays the run exactly.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    Dataset, assemble_segmentation, extract_patches, load_idx, load_raw_tensor, normalize_dataset,
    patch_label_grid, synth_blobs, synth_texture_raster, write_label_grid_csv,
)
from .errors import NumericalError, RecalError
from .kmeans import embed_dataset, kmeans_fit
from .metrics import (
    best_match_jaccard, cluster_histogram, cross_model_consensus, nmi, write_matrix_csv, write_metrics_report,
)
from .nn import convnet, load_model, mlp, save_model
from .trainer import TrainConfig, predict_labels, train, write_history_csv

log = logging.getLogger("recal")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class CliError(RecalError, ValueError):
    pass


# -- argument parsing ----------------------------------------------------

def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _int_list(text: str) -> str:
    try:
        [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    return str(text)


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(message)


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value file; flags override its values")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="recal-out")
    p.add_argument("--k", type=int, default=None, help="number of clusters")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--micro-batch", type=int, default=64)
    p.add_argument("--accum-steps", type=int, default=1)
    p.add_argument("--accum-mode", choices=("exact", "literal"), default="exact")
    p.add_argument("--patch-size", type=int, default=None)
    p.add_argument("--stride", type=int, default=None)


def _data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="'blobs', 'texture', an .rclt file or an IDX image file")
    p.add_argument("--labels", help="IDX label file matching --data")
    p.add_argument("--n-per-cluster", type=int, default=200)
    p.add_argument("--blob-dim", type=int, default=2)
    p.add_argument("--separation", type=float, default=6.0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--raster-size", type=int, default=128)
    p.add_argument("--raster-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="recal", description="Entropy-balanced deep clustering.")
    parser.add_argument("--version", action="version", version=f"recal {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a clustering network")
    _shared(p)
    _data_args(p)
    p.add_argument("--arch", choices=("mlp", "conv"), default="mlp")
    p.add_argument("--hidden", type=_int_list, default="16", help="MLP hidden widths")
    p.add_argument("--channels", type=_int_list, default="16,32", help="conv channel widths")
    p.add_argument("--fc", type=int, default=128, help="conv feature layer width (0 for none)")
    p.add_argument("--head-relu", type=_bool, default=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--normalize", type=_bool, default=True)
    p.add_argument("--per-channel", type=_bool, default=False)

    p = sub.add_parser("predict", help="write cluster labels for a dataset")
    _shared(p)
    _data_args(p)
    p.add_argument("--model", required=False)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    _shared(p)
    _data_args(p)
    p.add_argument("--model")
    p.add_argument("--predictions", help="labels CSV (index,label)")
    p.add_argument("--truth", help="ground-truth labels CSV (index,label)")
    p.add_argument("--compare", help="second labels CSV for the Jaccard consensus matrix")

    p = sub.add_parser("kmeans", help="k-means on raw inputs and, with --model, on embeddings")
    _shared(p)
    _data_args(p)
    p.add_argument("--model")
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--max-iter", type=int, default=300)
    p.add_argument("--normalize", type=_bool, default=True)

    p = sub.add_parser("segment", help="patch-wise segmentation of a raster")
    _shared(p)
    p.add_argument("--model")
    p.add_argument("--model2", help="second checkpoint for the cross-model consensus")
    p.add_argument("--raster", default="texture", help="'texture' or a C x H x W .rclt file")
    p.add_argument("--raster-size", type=int, default=128)
    p.add_argument("--raster-seed", type=int, default=0)
    return parser


SKIP_KEYS = {"command", "config"}


def _dests(parser: argparse.ArgumentParser, command: str) -> dict[str, str]:
    """Config key (underscored dest) -> the flag that sets it."""
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[command]
    out = {}
    for a in sub._actions:
        if a.option_strings and a.dest not in SKIP_KEYS and a.dest != "help":
            out[a.dest] = a.option_strings[-1]
            out[a.option_strings[-1].lstrip("-").replace("-", "_")] = a.option_strings[-1]
    return out


def read_config_file(path) -> dict[str, str]:
    entries = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        entries[key.strip().replace("-", "_")] = value.strip()
    return entries


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        known = _dests(parser, args.command)
        entries = read_config_file(args.config)
        unknown = sorted(k for k in entries if k not in known)
        if unknown:
            raise CliError(f"unknown config key(s) in {args.config}: {', '.join(unknown)}")
        # file values first so that explicit flags, parsed later, win
        prefix = [args.command]
        for key, value in entries.items():
            prefix += [known[key], value]
        args = parser.parse_args(prefix + argv[1:])
    if args.k is not None and args.k < 1:
        raise CliError(f"--k must be >= 1, got {args.k}")
    return args


def resolved_config(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in SKIP_KEYS and v is not None}


def write_resolved_config(args: argparse.Namespace, out_dir: Path) -> None:
    with open(out_dir / "config.txt", "w") as f:
        f.write(f"# recal {args.command}\n")
        for k, v in resolved_config(args).items():
            f.write(f"{k}={_fmt(v)}\n")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


# -- data ----------------------------------------------------------------

def load_dataset(args) -> tuple[Dataset, object]:
    """Dataset named by ``--data`` and, for rasters cut into patches, the grid."""
    src = args.data
    if src is None:
        raise CliError("--data is required")
    grid = None
    if src == "blobs":
        if args.k is None:
            raise CliError("--data blobs needs --k")
        d = synth_blobs(args.n_per_cluster, args.k, args.blob_dim, args.separation, args.sigma, seed=args.seed)
    elif src == "texture":
        raster, region = synth_texture_raster(args.raster_size, seed=args.raster_seed)
        d = Dataset(raster)
    else:
        path = Path(src)
        if not path.exists():
            raise CliError(f"data file {src} does not exist")
        if path.suffix == ".rclt":
            d = load_raw_tensor(path)
        else:
            d = load_idx(path, args.labels)
    if d.samples.ndim == 3 and args.patch_size is None:
        raise CliError("a C x H x W raster needs --patch-size (and --stride)")
    if args.patch_size is not None:
        if d.samples.ndim != 3:
            raise CliError("--patch-size applies to a single C x H x W raster")
        d, grid = extract_patches(d.samples, args.patch_size, args.stride or args.patch_size)
    return d, grid


def write_labels_csv(labels, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["index", "label"])
        for i, lab in enumerate(np.asarray(labels, dtype=np.int64).tolist()):
            w.writerow([i, lab])


def read_labels_csv(path) -> np.ndarray:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["index", "label"]:
        raise CliError(f"{path}: expected an 'index,label' header")
    return np.array([int(r[1]) for r in rows[1:]], dtype=np.int64)


def _model_inputs(samples: np.ndarray, flatten: bool) -> np.ndarray:
    return samples.reshape(len(samples), -1) if flatten else samples


def _prepare(extra: dict, d: Dataset) -> np.ndarray:
    if extra.get("stats") is not None:
        d = normalize_dataset(d, stats=extra["stats"])
    return _model_inputs(d.samples, extra.get("flatten", False))


def _load_checkpoint(path):
    if not path:
        raise CliError("--model is required")
    if not Path(path).exists():
        raise CliError(f"checkpoint {path} does not exist")
    return load_model(path)


# -- commands ------------------------------------------------------------

def cmd_train(args, out: Path) -> None:
    d, grid = load_dataset(args)
    if args.k is None:
        raise CliError("--k is required")
    stats = None
    if args.normalize:
        d = normalize_dataset(d, per_channel=args.per_channel)
        stats = d.stats
    if args.arch == "conv":
        if d.samples.ndim != 4:
            raise CliError("--arch conv needs image samples (N x C x H x W)")
        model = convnet(d.sample_shape, _ints(args.channels), args.k, fc=args.fc, head_relu=args.head_relu,
                        seed=args.seed)
        flatten = False
    else:
        model = mlp(int(np.prod(d.sample_shape)), _ints(args.hidden), args.k, head_relu=args.head_relu,
                    seed=args.seed)
        flatten = True
    X = _model_inputs(d.samples, flatten)
    cfg = TrainConfig(K=args.k, lam=args.lam, lr=args.lr, momentum=args.momentum,
                      micro_batch_size=args.micro_batch, micro_batches_per_step=args.accum_steps,
                      max_epochs=args.epochs, convergence_tol=args.tol, seed=args.seed,
                      accumulation_mode=args.accum_mode)
    result = train(model, X, cfg, labels=d.labels)
    labels = predict_labels(result.model, X)
    extra = {"stats": stats, "flatten": flatten, "K": args.k,
             "patch_size": args.patch_size, "stride": args.stride or args.patch_size}
    save_model(result.model, out / "model.rclm", extra)
    write_history_csv(result.history, out / "history.csv")
    write_labels_csv(labels, out / "labels.csv")
    metrics = {"epochs": len(result.history), "histogram": cluster_histogram(labels, args.k).tolist()}
    if result.history:
        metrics["final_loss"] = result.history[-1].loss
    if d.labels is not None:
        metrics["nmi"] = nmi(d.labels, labels)
    if grid is not None:
        seg = assemble_segmentation(grid, labels, K=args.k)
        seg.write_pgm(out / "segmentation.pgm")
        seg.write_csv(out / "segmentation.csv")
    write_metrics_report(metrics, out / "metrics.txt")
    print(" ".join(f"{k}={_fmt(v) if not isinstance(v, list) else v}" for k, v in metrics.items()))


def cmd_predict(args, out: Path) -> None:
    model, extra = _load_checkpoint(args.model)
    d, _ = load_dataset(args)
    labels = predict_labels(model, _prepare(extra, d))
    write_labels_csv(labels, out / "labels.csv")
    print(f"wrote {len(labels)} labels to {out / 'labels.csv'}")


def cmd_evaluate(args, out: Path) -> None:
    truth = read_labels_csv(args.truth) if args.truth else None
    if args.predictions:
        pred = read_labels_csv(args.predictions)
        if truth is None and args.data:
            truth = load_dataset(args)[0].labels
    else:
        model, extra = _load_checkpoint(args.model)
        d, _ = load_dataset(args)
        pred = predict_labels(model, _prepare(extra, d))
        truth = truth if truth is not None else d.labels
    if truth is None:
        raise CliError("evaluation needs ground-truth labels (--truth or a labelled --data)")
    K = args.k or int(max(pred.max(), truth.max())) + 1
    metrics = {"nmi": nmi(truth, pred), "samples": int(pred.size), "histogram": cluster_histogram(pred, K).tolist()}
    matrix = None
    if args.compare:
        other = read_labels_csv(args.compare)
        K = max(K, int(other.max()) + 1)
        matrix = cross_model_consensus(pred, other, K)
        metrics["nmi_compare"] = nmi(pred, other)
    write_metrics_report(metrics, out / "metrics.txt", out / "metrics.csv", matrix,
                         out / "jaccard.csv" if matrix is not None else None)
    print(f"nmi={metrics['nmi']!r}")


def cmd_kmeans(args, out: Path) -> None:
    d, _ = load_dataset(args)
    K = args.k
    if K is None:
        raise CliError("--k is required")
    metrics = {}
    model = extra = None
    if args.model:
        model, extra = _load_checkpoint(args.model)
    raw = d.samples
    if args.normalize:
        raw = normalize_dataset(d, stats=extra.get("stats") if extra else None).samples
    raw = raw.reshape(len(raw), -1)
    res = kmeans_fit(raw, K, restarts=args.restarts, max_iter=args.max_iter, seed=args.seed)
    write_labels_csv(res.assignment.labels, out / "kmeans_raw_labels.csv")
    metrics["inertia_raw"] = res.inertia
    if d.labels is not None:
        metrics["nmi_raw"] = nmi(d.labels, res.assignment.labels)
    if model is not None:
        Z = embed_dataset(model, _prepare(extra, d))
        emb = kmeans_fit(Z, K, restarts=args.restarts, max_iter=args.max_iter, seed=args.seed)
        write_labels_csv(emb.assignment.labels, out / "kmeans_embedding_labels.csv")
        metrics["inertia_embedding"] = emb.inertia
        if d.labels is not None:
            metrics["nmi_embedding"] = nmi(d.labels, emb.assignment.labels)
    write_metrics_report(metrics, out / "metrics.txt", out / "metrics.csv")
    print(" ".join(f"{k}={v!r}" for k, v in metrics.items()))


def _segment_with(model, extra, raster, P, S, K):
    d, grid = extract_patches(raster, P, S)
    labels = predict_labels(model, _prepare(extra, d))
    return grid, labels, assemble_segmentation(grid, labels, K=K)


def cmd_segment(args, out: Path) -> None:
    model, extra = _load_checkpoint(args.model)
    region = None
    if args.raster == "texture":
        raster, region = synth_texture_raster(args.raster_size, seed=args.raster_seed)
    else:
        if not Path(args.raster).exists():
            raise CliError(f"raster {args.raster} does not exist")
        raster = load_raw_tensor(args.raster).samples
    if raster.ndim != 3:
        raise CliError(f"raster must be C x H x W, got shape {raster.shape}")
    P = args.patch_size or extra.get("patch_size")
    S = args.stride or extra.get("stride") or P
    if P is None:
        raise CliError("--patch-size is required (the checkpoint does not record one)")
    K = model.K
    grid, labels, seg = _segment_with(model, extra, raster, P, S, K)
    seg.write_pgm(out / "segmentation.pgm")
    seg.write_csv(out / "segmentation.csv")
    write_label_grid_csv(patch_label_grid(grid, labels), out / "patch_labels.csv")
    metrics = {"patches": len(grid), "histogram": cluster_histogram(labels, K).tolist()}
    if region is not None:
        metrics["region_best_jaccard"] = best_match_jaccard(region, seg.labels, K)
    if args.model2:
        model2, extra2 = _load_checkpoint(args.model2)
        if model2.K != K:
            raise CliError(f"checkpoints disagree on K: {K} vs {model2.K}")
        _, labels2, seg2 = _segment_with(model2, extra2, raster, P, S, K)
        seg2.write_pgm(out / "segmentation2.pgm")
        seg2.write_csv(out / "segmentation2.csv")
        matrix = _masked_consensus(seg, seg2, K)
        write_matrix_csv(matrix, out / "cross_jaccard.csv")
        metrics["consensus_row_best"] = matrix.max(axis=1).tolist()
    write_metrics_report(metrics, out / "metrics.txt")
    print(" ".join(f"{k}={v}" for k, v in metrics.items()))


def _masked_consensus(seg1, seg2, K):
    """Consensus over the pixels both maps cover."""
    keep = (seg1.labels >= 0) & (seg2.labels >= 0)
    return cross_model_consensus(seg1.labels[keep], seg2.labels[keep], K)


COMMANDS = {"train": cmd_train, "predict": cmd_predict, "evaluate": cmd_evaluate,
            "kmeans": cmd_kmeans, "segment": cmd_segment}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = parse_args(argv)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            COMMANDS[args.command](args, out)
        write_resolved_config(args, out)
    except NumericalError as exc:
        print(f"recal: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (RecalError, ValueError, OSError) as exc:
        print(f"recal: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
