"""Command-line front end: train / eval / gradcheck / params / bench / analyze.

Exit codes: 0 success, 1 failed check, 2 configuration problem, 3 data
problem, 4 numeric failure during compute.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .analysis import (
    DEFAULT_EPSILONS,
    fgsm_curve,
    flatten_layer_filters,
    generalization_gap,
    kernel_correlation,
    write_matrix_csv,
)
from .bench import (
    endpoint_ratio_deviation,
    linearity_deviation,
    sweep,
    thread_speedup,
)
from .data import DEFAULT_DATA_DIR, DataError
from .gradcheck import run_all
from .model import (
    CheckpointError,
    ConfigError,
    count_parameters,
    format_config_text,
    load_checkpoint,
    parse_config_text,
    preset,
    PRESETS,
)
from .tensor_core import ShapeError
from .training import (
    NumericError,
    TrainConfig,
    build_pipeline,
    evaluate,
    train,
)

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _model_from_args(args):
    if getattr(args, "config", None):
        if getattr(args, "preset", None):
            raise ConfigError("give either --preset or --config, not both")
        try:
            with open(args.config) as fh:
                return parse_config_text(fh.read())
        except FileNotFoundError:
            raise ConfigError(f"no config file at {args.config}") from None
    if getattr(args, "preset", None):
        return preset(args.preset)
    raise ConfigError("one of --preset or --config is required")


def _dataset_for(config, args):
    if getattr(args, "dataset", None):
        return args.dataset
    return "cifar10" if config.capsule.n == 3 else "mnist"


def _seed(args, fallback: int = 0) -> int:
    return fallback if args.seed is None else args.seed


def _int_list(text: str, flag: str) -> list:
    """'50,100' -> [50, 100]; '50..200' -> [50, 100, 150, 200] (step 50)."""
    try:
        if ".." in text:
            lo, hi = (int(v) for v in text.split("..", 1))
            step = 50 if hi - lo >= 50 else 1
            return list(range(lo, hi + 1, step))
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise ConfigError(f"cannot parse {flag} value {text!r}") from None


# ---------------------------------------------------------------------------
# subcommands

def cmd_train(args) -> int:
    config = _model_from_args(args)
    dataset = _dataset_for(config, args)
    base = TrainConfig.cifar() if dataset == "cifar10" else TrainConfig.mnist()
    overrides = {
        "seed": _seed(args),
        "threads": args.threads,
    }
    for field, flag in (("iterations", "iters"), ("batch_size", "batch"),
                        ("base_lr", "lr"), ("eval_every", "eval_every"),
                        ("decay_every", "decay_every"),
                        ("checkpoint_every", "checkpoint_every"),
                        ("optimizer", "optimizer")):
        value = getattr(args, flag)
        if value is not None:
            overrides[field] = value
    from dataclasses import replace
    tcfg = replace(base, **overrides)

    pipeline = build_pipeline(dataset, args.data_dir, tcfg.seed)
    result = train(config, tcfg, pipeline, args.out_dir,
                   resume_from=args.resume, log=print, command=args.command)
    print(f"done: iteration {result.iteration}, "
          f"test loss {result.final_eval.loss:.5f}, "
          f"test accuracy {result.final_eval.accuracy:.4f} "
          f"(error {result.final_eval.error * 100:.2f}%)")
    print(f"artifacts in {result.out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    config = ck.config
    dataset = _dataset_for(config, args)
    pipeline = build_pipeline(dataset, args.data_dir, _seed(args, ck.seed))
    images, labels = pipeline.eval_set()
    res = evaluate(config, ck.kernels, images, labels, config.loss,
                   threads=args.threads,
                   batch=args.batch if args.batch else 256)
    print(f"checkpoint {args.checkpoint} (iteration {ck.iteration})")
    print(f"{dataset} test: loss {res.loss:.5f}  accuracy {res.accuracy:.4f}"
          f"  error {res.error * 100:.2f}%")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    presets = [args.preset] if args.preset else None
    results = run_all(seed=_seed(args), sample=args.sample, presets=presets)
    for res in results:
        print(res)
    bad = [r for r in results if not r.ok]
    print(f"{len(results) - len(bad)}/{len(results)} gradient checks passed")
    return EXIT_FAIL if bad else EXIT_OK


def cmd_params(args) -> int:
    config = _model_from_args(args)
    per_layer, total = count_parameters(config)
    print(f"model {config.name}")
    for i, (layer, n) in enumerate(zip(config.layers, per_layer)):
        c = layer.capsule_in
        print(f"  layer {i}: {layer.kh}x{layer.kw}x{layer.in_channels}"
              f"x{layer.out_channels} ({c.g}x{c.m}x{c.n}->{layer.p}) "
              f"stride {layer.stride}  params {n}")
    print(f"total {total}")
    p0_total = count_parameters(preset("p0"))[1]
    p3_total = count_parameters(preset("p3"))[1]
    print(f"diagnostic: computed from geometry, p0 has {p0_total} parameters "
          f"and p3 has {p3_total}; sources quoting ~171K for the p0 layer "
          f"list and ~22.2K for the p3 one have those two totals swapped.")
    return EXIT_OK


def cmd_bench(args) -> int:
    config = _model_from_args(args)
    batches = _int_list(args.batch or "50..200", "--batch")
    threads = sorted(set(_int_list(args.threads, "--threads")))
    if not batches or not threads or min(threads) < 1:
        raise ConfigError("need at least one batch size and positive threads")
    iters = args.iters if args.iters else 5
    results = sweep(config, batches=batches, iters=iters,
                    threads=threads, seed=_seed(args))
    for r in results:
        print(r)
    report = {"results": [vars(r) | {"per_100": r.per_100} for r in results]}
    single = [r for r in results if r.threads == threads[0]]
    if len(single) >= 2:
        lin = linearity_deviation(single)
        end = endpoint_ratio_deviation(single)
        report["linearity_deviation"] = lin
        report["endpoint_ratio_deviation"] = end
        print(f"linear-fit deviation {lin * 100:.1f}%  "
              f"endpoint-ratio deviation {end * 100:.1f}%")
    if len(threads) > 1:
        big = max(batches)
        lo = next(r for r in results if r.threads == threads[0] and r.batch == big)
        hi = next(r for r in results if r.threads == threads[-1] and r.batch == big)
        s = thread_speedup(lo, hi)
        report["thread_speedup"] = s
        print(f"threads {threads[0]} -> {threads[-1]} speedup at batch "
              f"{big}: {s:.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return EXIT_OK


def analyze_corr(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    out_dir = args.out_dir or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out_dir, exist_ok=True)
    for i, kernel in enumerate(ck.kernels):
        corr = kernel_correlation(kernel)
        write_matrix_csv(os.path.join(out_dir, f"filters_layer{i}.csv"),
                         flatten_layer_filters(kernel))
        write_matrix_csv(os.path.join(out_dir, f"corr_layer{i}.csv"),
                         corr.values)
        off = corr.values[~np.eye(corr.size, dtype=bool)]
        flagged = int(corr.degenerate.sum())
        note = f", {flagged} zero-variance rows" if flagged else ""
        print(f"layer {i}: {corr.size}x{corr.size} taps, "
              f"mean |r| off-diagonal {np.abs(off).mean():.4f}{note}")
    print(f"matrices written to {out_dir}")
    return EXIT_OK


def analyze_fgsm(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    config = ck.config
    dataset = _dataset_for(config, args)
    pipeline = build_pipeline(dataset, args.data_dir, _seed(args, ck.seed))
    images, labels = pipeline.eval_set()
    if args.samples and args.samples < images.shape[0]:
        images, labels = images[:args.samples], labels[:args.samples]
    epsilons = [float(v) for v in args.epsilons.split(",") if v] \
        if args.epsilons else list(DEFAULT_EPSILONS)
    points = fgsm_curve(config, ck.kernels, images, labels,
                        epsilons=epsilons, threads=args.threads)
    print(f"clean accuracy {points[0].clean_accuracy:.4f} "
          f"on {points[0].samples} samples")
    for p in points:
        print(f"  epsilon {p.epsilon:<5g} accuracy {p.adversarial_accuracy:.4f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump([p.as_dict() for p in points], fh, indent=2)
            fh.write("\n")
        print(f"report written to {args.out}")
    return EXIT_OK


def analyze_gap(args) -> int:
    metrics = args.metrics or os.path.join(args.run_dir, "metrics.csv")
    if not os.path.exists(metrics):
        raise DataError(f"no metrics file at {metrics}")
    series, terminal = generalization_gap(metrics, window=args.window)
    for it, tr, te, gap in series[-args.window:]:
        print(f"  iter {it:>7}: train loss {tr:.5f}  test loss {te:.5f}  "
              f"gap {gap:+.5f}")
    print(f"terminal gap (mean of last {min(args.window, len(series))}): "
          f"{terminal:+.5f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write("iteration,train_loss,test_loss,gap\n")
            for row in series:
                fh.write(",".join(repr(v) if isinstance(v, float) else str(v)
                                  for v in row) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="capsconv",
        description="Capsule-convolution engine: train, evaluate, and "
                    "inspect kernel-mapped capsule networks.")
    sub = parser.add_subparsers(dest="cmd", required=True)

    model_opts = argparse.ArgumentParser(add_help=False)
    model_opts.add_argument("--preset", choices=sorted(PRESETS),
                            help="built-in architecture name")
    model_opts.add_argument("--config", help="architecture description file")

    run_opts = argparse.ArgumentParser(add_help=False)
    run_opts.add_argument("--seed", type=int, default=None,
                          help="run seed (default 0, or the checkpoint's)")
    run_opts.add_argument("--threads", type=int,
                          default=max(1, os.cpu_count() or 1),
                          help="worker threads (default: all cores)")

    data_opts = argparse.ArgumentParser(add_help=False)
    data_opts.add_argument("--data-dir", default=DEFAULT_DATA_DIR,
                           help="dataset directory (env CAPSCONV_DATA)")
    data_opts.add_argument("--dataset", choices=("mnist", "cifar10"),
                           help="dataset (default: inferred from the model)")

    p = sub.add_parser("train", parents=[model_opts, run_opts, data_opts],
                       help="train a model and write run artifacts")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--eval-every", type=int, default=None)
    p.add_argument("--decay-every", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default=None)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[run_opts, data_opts],
                       help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--batch", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[run_opts],
                       help="finite-difference verification suite")
    p.add_argument("--preset", choices=sorted(PRESETS),
                   help="restrict layer checks to one architecture")
    p.add_argument("--sample", type=int, default=200,
                   help="coordinates probed per large tensor")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", parents=[model_opts],
                       help="per-layer and total parameter counts")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("bench", parents=[model_opts],
                       help="time training iterations on synthetic data")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", default="1",
                   help="comma-separated thread counts (default '1')")
    p.add_argument("--batch", default=None,
                   help="batch sizes: '50,100' or '50..200' (default)")
    p.add_argument("--iters", type=int, default=None,
                   help="timed iterations per point (default 5)")
    p.add_argument("--json", help="also write the table to this file")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("analyze", help="diagnostics over trained artifacts")
    asub = p.add_subparsers(dest="mode", required=True)

    a = asub.add_parser("corr", help="kernel spatial-tap correlation matrices")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--out-dir", default=None)
    a.set_defaults(func=analyze_corr)

    a = asub.add_parser("fgsm", parents=[run_opts, data_opts],
                        help="input-gradient sign attack accuracy curve")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--samples", type=int, default=None,
                   help="attack only the first N test images")
    a.add_argument("--epsilons", default=None,
                   help="comma-separated grid (default 0.05..0.3)")
    a.add_argument("--out", help="write the report as JSON here")
    a.set_defaults(func=analyze_fgsm)

    a = asub.add_parser("gap", help="train/test loss gap from a run's metrics")
    a.add_argument("--run-dir", default=".")
    a.add_argument("--metrics", default=None,
                   help="explicit metrics.csv path (overrides --run-dir)")
    a.add_argument("--window", type=int, default=5)
    a.add_argument("--out", help="write the gap series as CSV here")
    a.set_defaults(func=analyze_gap)

    return parser


def main(argv=None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    parser = build_parser()
    args = parser.parse_args(argv)
    args.command = "capsconv " + " ".join(argv)
    try:
        return args.func(args)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, CheckpointError, ShapeError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
