"""Command-line surface: profiling, gradient checking, training, evaluation,
benchmarking, and analysis export.

Exit codes: 0 success, 1 verification failure, 2 usage/config error,
3 IO error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import analysis, bench, flops, gradcheck
from . import tensor as tensor_io
from .config import ModelConfig, load_config
from .data import Cifar10Dataset, load_checkpoint, save_checkpoint
from .errors import CheckpointError, ConfigError, ShapeError
from .train import TrainConfig, evaluate, train_loop
from .vit import forward_batch, init_params

EXIT_OK = 0
EXIT_VERIFICATION = 1
EXIT_CONFIG = 2
EXIT_IO = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skipat",
        description="Vision transformer with skip-attention blocks: cost "
                    "model, gradient checks, training, benchmarks, analysis.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("flops", help="analytic MAC/parameter report")
    p.add_argument("--config", required=True)
    fmt = p.add_mutually_exclusive_group()
    fmt.add_argument("--json", action="store_true")
    fmt.add_argument("--csv", action="store_true")
    p.add_argument("--minor", action="store_true",
                   help="include the elementwise 'minor ops' column")
    p.add_argument("--sweep", metavar="START:STOP:STEP",
                   help="attention-vs-skip-function cost sweep over token "
                        "counts instead of a per-block report")

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-4)

    p = sub.add_parser("bench", help="forward-only throughput benchmark")
    p.add_argument("--config", required=True)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--synthetic", action="store_true", default=True,
                   help="time synthetic batches (the only supported source)")

    p = sub.add_parser("train", help="train on CIFAR-10 binary batches")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", help="write the per-epoch CSV log here")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subset", type=int, default=None,
                   help="train on the first N samples only")
    p.add_argument("--eval-subset", type=int, default=None)
    p.add_argument("--no-flip", action="store_true")
    p.add_argument("--no-crop", action="store_true")
    p.add_argument("--save-optimizer", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="evaluate under this config instead of "
                                    "the checkpoint's own")
    p.add_argument("--limit", type=int, default=None)

    p = sub.add_parser("analyze", help="CKA matrices and attention masks")
    asub = p.add_subparsers(dest="analysis", required=True)

    pc = asub.add_parser("cka", help="layer-by-layer linear CKA")
    pc.add_argument("--checkpoint", required=True)
    src = pc.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="CIFAR-10 directory (test split)")
    src.add_argument("--input", help="SKTN file holding a (b,c,h,w) batch")
    pc.add_argument("--target", default="zmsa",
                    choices=list(analysis.CKA_TARGETS))
    pc.add_argument("--samples", type=int, default=8)
    pc.add_argument("--out", required=True, help="CSV output path")
    pc.add_argument("--svg", help="also write an SVG heatmap here")

    pa = asub.add_parser("attn", help="attention-mass segmentation mask")
    pa.add_argument("--checkpoint", required=True)
    src = pa.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="CIFAR-10 directory (test split)")
    src.add_argument("--input", help="SKTN file holding one (c,h,w) image")
    pa.add_argument("--index", type=int, default=0,
                    help="image index within --data")
    pa.add_argument("--layer", type=int, default=0,
                    help="1-based layer; 0 means the final layer")
    pa.add_argument("--mass", type=float, default=0.8)
    pa.add_argument("--out", required=True, help="mask grid output path")
    pa.add_argument("--gt", help="ground-truth mask grid to score (Jaccard)")
    return parser


# ---------------------------------------------------------------------------
# command implementations

def _cmd_flops(args) -> int:
    config = load_config(args.config)
    if args.sweep:
        try:
            start, stop, step = (int(v) for v in args.sweep.split(":"))
        except ValueError:
            raise ConfigError(f"bad --sweep spec {args.sweep!r}, "
                              f"expected START:STOP:STEP")
        sweep = flops.crossover_sweep(config.embed_dim, config.dwc_kernel,
                                      config.expansion,
                                      range(start, stop, step))
        if args.csv:
            sys.stdout.write(flops.sweep_to_csv(sweep))
        else:
            import json as _json
            print(_json.dumps(sweep, indent=2))
        return EXIT_OK
    report = flops.analytic_flops(config)
    if args.json:
        print(report.to_json(include_minor=args.minor))
    elif args.csv:
        print("block,kind,macs,params")
        for e in report.entries:
            print(f"{e.block},{e.kind},{e.macs},{e.params}")
    else:
        print(report.to_text(include_minor=args.minor))
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    config = load_config(args.config)
    shrunk, changed = gradcheck.shrink_for_gradcheck(config)
    if changed:
        print(f"config exceeds gradcheck limits; shrunk to "
              f"n={shrunk.num_patches}, d={shrunk.embed_dim}, "
              f"L={shrunk.depth}, skip={list(shrunk.skip_layers)}")
    result = gradcheck.gradcheck_model(shrunk, seed=args.seed, eps=args.eps,
                                       tol=args.tol)
    print(result.summary())
    return EXIT_OK if result.passed else EXIT_VERIFICATION


def _cmd_bench(args) -> int:
    config = load_config(args.config)
    result = bench.run_bench(config, batch=args.batch, iters=args.iters,
                             warmup=args.warmup, seed=args.seed)
    print(result.to_json())
    return EXIT_OK


def _cmd_train(args) -> int:
    config = load_config(args.config)
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                       lr=args.lr, weight_decay=args.weight_decay,
                       seed=args.seed, subset_size=args.subset,
                       flip=not args.no_flip, crop=not args.no_crop,
                       eval_subset_size=args.eval_subset)
    result = train_loop(config, tcfg, args.data)
    save_checkpoint(args.out, result.params, config,
                    result.optimizer_state if args.save_optimizer else None)
    if args.log:
        Path(args.log).write_text(result.log.to_csv())
    return EXIT_OK


def _cmd_eval(args) -> int:
    target = load_config(args.config) if args.config else None
    params, config, _ = load_checkpoint(args.checkpoint, target)
    dataset = Cifar10Dataset(args.data, "test")
    acc = evaluate(params, config, dataset, limit=args.limit)
    print(f"accuracy,{acc:.4f}")
    return EXIT_OK


def _collect_traces(args, config, params, count):
    if args.data:
        dataset = Cifar10Dataset(args.data, "test")
        from .data import batch_from_dataset
        idx = range(min(count, len(dataset)))
        images = batch_from_dataset(dataset, idx).images
    else:
        images = tensor_io.load_tensor(args.input).astype(np.float32)
        if images.ndim == 3:
            images = images[None]
        images = images[:count]
    _, traces, _ = forward_batch(images, params, config, want_trace=True)
    return traces


def _cmd_analyze_cka(args) -> int:
    params, config, _ = load_checkpoint(args.checkpoint)
    if args.target in ("attn_cls", "attn_all") and config.skip_layers \
            and config.phi_kind != "attn_reuse":
        available = sorted(set(range(1, config.depth + 1))
                           - set(config.skip_layers))
        raise ConfigError(
            f"target {args.target} needs attention at every layer, but this "
            f"model skips {list(config.skip_layers)}; attention exists only "
            f"at layers {available}")
    traces = _collect_traces(args, config, params, args.samples)
    matrix = analysis.cka_matrix(traces, args.target, config)
    Path(args.out).write_text(matrix.to_csv())
    if args.svg:
        Path(args.svg).write_text(matrix.to_svg())
    print(f"wrote {matrix.depth}x{matrix.depth} CKA matrix "
          f"({args.target}, {matrix.sample_count} samples) to {args.out}")
    return EXIT_OK


def write_mask_grid(path, mask: np.ndarray) -> None:
    lines = ["".join("1" if v else "0" for v in row) for row in mask]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mask_grid(path) -> np.ndarray:
    rows = [line.strip() for line in
            Path(path).read_text().splitlines() if line.strip()]
    return np.array([[ch == "1" for ch in row] for row in rows], dtype=bool)


def _cmd_analyze_attn(args) -> int:
    params, config, _ = load_checkpoint(args.checkpoint)
    layer = args.layer if args.layer > 0 else config.depth
    if not (1 <= layer <= config.depth):
        raise ConfigError(f"layer {layer} outside 1..{config.depth}")
    traces = _collect_traces(args, config, params, args.index + 1)
    trace = traces[min(args.index, len(traces) - 1)]
    rec = trace.layers[layer - 1]
    if rec.attn is None:
        available = [i + 1 for i, r in enumerate(trace.layers)
                     if r.attn is not None]
        raise ConfigError(
            f"layer {layer} skipped its attention; available layers: "
            f"{available}")
    head_mean = rec.attn.mean(axis=0)
    attn_cls = head_mean[0, 1:] if config.use_cls_token else head_mean.mean(axis=0)
    result = analysis.mass_threshold_mask(attn_cls, args.mass,
                                          source=f"layer{layer}.head_mean")
    write_mask_grid(args.out, result.mask)
    print(f"mask,{args.out},mass_kept,{result.mass_kept:.6f}")
    if args.gt:
        gt = read_mask_grid(args.gt)
        print(f"jaccard,{analysis.jaccard(result.mask, gt):.6f}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "flops":
            return _cmd_flops(args)
        if args.command == "gradcheck":
            return _cmd_gradcheck(args)
        if args.command == "bench":
            return _cmd_bench(args)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "analyze":
            if args.analysis == "cka":
                return _cmd_analyze_cka(args)
            return _cmd_analyze_attn(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return EXIT_VERIFICATION


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
