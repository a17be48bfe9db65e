"""Command-line entry point: gen-data, train, eval, gradcheck, ablate.

Human-readable text goes to stdout, machine-readable JSON to files. Exit
codes: 0 success, 1 check/benchmark failure, 2 usage or environment error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from .data import generate_dataset, load_dataset
from .network import load_checkpoint
from .retrieval import evaluate, run_ablation
from .training import TrainConfig, gradcheck, run_config_from_dict, train

USAGE_ERROR = 2
CHECK_FAILURE = 1


def resolve_threads(value: int | None) -> int:
    if value is None:
        env = os.environ.get("VAMKIT_THREADS")
        value = int(env) if env else 1
    if value < 1:
        raise ValueError(f"threads must be >= 1, got {value}")
    return value


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(part) for part in text.lower().split("x"))
    except ValueError:
        raise ValueError(f"size must look like 32x32, got {text!r}") from None
    return h, w


def _parse_ks(text: str) -> list[int]:
    try:
        ks = sorted({int(part) for part in text.split(",") if part.strip()})
    except ValueError:
        raise ValueError(f"bad k list {text!r}") from None
    if not ks or ks[0] < 1:
        raise ValueError(f"k values must be positive, got {text!r}")
    return ks


def cmd_gen_data(args) -> int:
    manifest = generate_dataset(args.out, n_items=args.items,
                                consumers_per_item=args.consumers,
                                extents=_parse_size(args.size), seed=args.seed,
                                shops_per_item=args.shops,
                                occlusion_prob=args.occlusion)
    n_gallery = sum(len(it.shop) for it in manifest.items)
    n_query = sum(len(it.consumer) for it in manifest.items)
    print(f"dataset written to {args.out}")
    print(f"items: {len(manifest.items)}")
    print(f"gallery images: {n_gallery}")
    print(f"query images: {n_query}")
    print(f"extents: {manifest.extents[0]}x{manifest.extents[1]} seed: {manifest.seed}")
    return 0


def _load_run_config(config_path: str | None) -> tuple[TrainConfig, str | None]:
    if config_path is None:
        return TrainConfig().validate(), None
    path = Path(config_path)
    if not path.is_file():
        raise ValueError(f"missing config file: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"invalid JSON in {path}: {exc}") from None
    return run_config_from_dict(doc)


def cmd_train(args) -> int:
    config, data_from_config = _load_run_config(args.config)
    data_dir = args.data or data_from_config
    if not data_dir:
        raise ValueError("no dataset given: pass --data or a 'data' key in the config")
    ds = load_dataset(data_dir)
    resolve_threads(args.threads)
    result = train(ds, config, out_dir=args.out)
    losses = [h["mean_loss"] for h in result.history]
    print(f"trained {config.epochs} epochs on {data_dir}")
    print(f"config hash: {result.config_hash}")
    print(f"initial loss: {losses[0]:.6f}")
    print(f"final loss:   {losses[-1]:.6f}")
    print(f"checkpoint: {result.checkpoint_dir}")
    return 0


def cmd_eval(args) -> int:
    net, manifest = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    if (net.config.in_h, net.config.in_w) != ds.extents:
        raise ValueError(
            f"dim mismatch: checkpoint expects {net.config.in_h}x{net.config.in_w} "
            f"images, dataset is {ds.extents[0]}x{ds.extents[1]}")
    ks = _parse_ks(args.k)
    threads = resolve_threads(args.threads)
    accuracies, _ = evaluate(net, ds, ks, task=args.task, threads=threads)
    for k in ks:
        print(f"top-{k} accuracy: {accuracies[k]:.4f}")
    report = {
        "config_hash": manifest.get("config_hash", ""),
        "task": args.task,
        "rows": [{"k": k, "accuracy": accuracies[k]} for k in ks],
    }
    report_path = Path(args.report) if args.report else Path(args.ckpt) / f"eval_{args.task}.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True))
    print(f"report written to {report_path}")
    return 0


def cmd_gradcheck(args) -> int:
    report = gradcheck(seed=args.seed, scope=args.scope)
    print(report.format())
    return 0 if report.passed else CHECK_FAILURE


def cmd_ablate(args) -> int:
    ds = load_dataset(args.data)
    config, _ = _load_run_config(args.config)
    overrides = {}
    if args.fraction is not None:
        overrides["train_fraction"] = args.fraction
    if args.margin is not None:
        overrides["margin"] = args.margin
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if overrides:
        config = dataclasses.replace(config, **overrides).validate()
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    seeds = [args.seed + i for i in range(args.seeds)]
    ks = _parse_ks(args.k)
    threads = resolve_threads(args.threads)
    report = run_ablation(ds, config, modes, seeds, ks, threads=threads)
    print(report.format_table())
    out_path = Path(args.out)
    out_path.write_text(report.to_json())
    print(f"report written to {out_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vamkit",
                                     description="attention-gated embedding toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic cross-domain dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--items", type=int, default=16)
    p.add_argument("--consumers", type=int, default=2)
    p.add_argument("--shops", type=int, default=1,
                   help="shop images per item (2+ enables the in-shop task)")
    p.add_argument("--size", default="32x32")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--occlusion", type=float, default=0.3,
                   help="probability a consumer image carries an occluding patch")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train an embedding network")
    p.add_argument("--data", default=None)
    p.add_argument("--config", default=None, help="JSON run config file")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate top-k retrieval accuracy")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", default="1,5,10,20")
    p.add_argument("--task", choices=("c2s", "inshop"), default="c2s")
    p.add_argument("--report", default=None)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scope", choices=("layer", "network", "all"), default="all")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train/evaluate a grid of gate modes and seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--modes", default="impdrop,product,none")
    p.add_argument("--seeds", type=int, default=1, help="number of seeds")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--fraction", type=float, default=None)
    p.add_argument("--margin", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--k", default="1,5,10,20")
    p.add_argument("--out", default="ablation.json")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
