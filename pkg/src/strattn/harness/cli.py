"""Command-line entry point: ``strattn <subcommand> ...``.

Exit codes: 0 success, 1 validation failure (bad config, shapes, files),
2 numerical failure (non-finite values, failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from ..tensor import NumericalError

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2

log = logging.getLogger("strattn")


def _input_hw(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"extents must be positive, got {text!r}")
    return h, w


def cmd_train(args) -> int:
    from .config import load_config, with_overrides
    from .train import train

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = with_overrides(cfg, seed=args.seed)
    out = Path(args.out) if args.out else Path("runs") / f"{Path(args.config).stem}_seed{cfg.seed}"
    result = train(cfg, out, resume=args.resume, epochs=args.epochs)
    print(f"checkpoint: {result.checkpoint}")
    print(f"log: {result.log_path}")
    print(f"train_acc: {result.final_train_acc:.4f}")
    if result.test_metrics is not None:
        print(json.dumps(result.test_metrics, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import Checkpoint, load_dataset
    from .train import evaluate, restore

    cfg, model, _, _ = restore(Checkpoint.load(args.checkpoint))
    ds, _ = load_dataset(args.data)
    print(json.dumps(evaluate(model, ds, cfg, radius=args.radius), sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from ..verification.suite import run_gradient_suite

    def show(res):
        status = "PASS" if res.passed else "FAIL"
        print(f"{status} {res.module:10s} {res.name:48s} max_rel={res.report.max_rel_error:.3e}")
        if not res.passed:
            print(res.report)

    results = run_gradient_suite(args.module, args.tol, args.instances, args.seed, on_result=show)
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} gradient checks passed (tol {args.tol:g})")
    return EXIT_OK if failed == 0 else EXIT_NUMERICAL


def cmd_flops(args) -> int:
    from ..verification.cost import count_cost
    from .config import load_config

    target = args.preset if args.preset else load_config(args.config).arch
    report = count_cost(target, args.input, args.convention)
    print(report.to_csv() if args.format == "csv" else report.to_text(), end="" if args.format == "csv" else "\n")
    return EXIT_OK


def cmd_export(args) -> int:
    from .checkpoint import load_dataset
    from .export import export_mode_maps

    ds, _ = load_dataset(args.images)
    written = export_mode_maps(args.checkpoint, ds, args.out, limit=args.limit)
    for block, maps in written.items():
        print(f"{block}: {maps['masks'].shape[0]} images x {maps['masks'].shape[1]} modes -> {Path(args.out) / block}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    from .checkpoint import save_dataset
    from .config import load_config
    from .data import generate_parts_dataset
    from .train import TEST_SEED_OFFSET

    cfg = load_config(args.config)
    seed = cfg.seed + (TEST_SEED_OFFSET if args.split == "test" else 0)
    samples = cfg.data.test_samples if args.split == "test" else cfg.data.train_samples
    ds = generate_parts_dataset(cfg.data, seed, samples)
    save_dataset(args.out, ds, {"split": args.split, "seed": seed})
    print(f"wrote {len(ds)} {args.split} samples to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="strattn", description="Structure-regularized attention toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress and defaulted config keys")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train on the synthetic parts dataset")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="run directory (default runs/<config>_seed<N>)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--epochs", type=int, help="total epochs to reach (default from config)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--radius", type=float, help="alignment radius in pixels")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    g.add_argument("--module", choices=("all", "local", "mode", "block"), default="all")
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--instances", type=int, default=3)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    f = sub.add_parser("flops", help="analytic FLOPs and parameter count")
    src = f.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=("resnet50", "resnet50_stra"))
    src.add_argument("--config")
    f.add_argument("--input", type=_input_hw, default=(256, 128), help="HxW (default 256x128)")
    f.add_argument("--format", choices=("text", "csv"), default="text")
    f.add_argument("--convention", choices=("mac", "2mac"), default="mac",
                   help="FLOPs per multiply-accumulate: mac=1, 2mac=2")
    f.set_defaults(func=cmd_flops)

    x = sub.add_parser("export-modes", help="write mask / coefficient heatmaps")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--images", required=True, help="dataset file from gen-data")
    x.add_argument("--out", required=True)
    x.add_argument("--limit", type=int)
    x.set_defaults(func=cmd_export)

    d = sub.add_parser("gen-data", help="generate a synthetic parts dataset file")
    d.add_argument("--config", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--split", choices=("train", "test"), default="test")
    d.set_defaults(func=cmd_gen_data)
    return p


def _threads() -> int:
    raw = os.environ.get("STRATT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"STRATT_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"STRATT_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, TypeError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
