"""Command-line entry point.

Subcommands: synth (generate a dataset), train (one mode on one fold),
eval (score a checkpoint on its held-out fold), gradcheck (the
finite-difference battery), report (aggregate fold metrics into one table
with published reference numbers).

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every run echoes
its resolved configuration and seed on stdout. Repeating a command with the
same flags and seed reproduces its artifacts byte for byte; wall-clock
timing lives in a separate timing.txt.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

from . import __version__

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aunet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"aunet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a deterministic synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subjects", type=int, default=6)
    p.add_argument("--sessions", type=int, default=2)
    p.add_argument("--frames", type=int, default=120)
    p.add_argument("--image-size", type=int, default=40, help="square image side in pixels")

    p = sub.add_parser("train", help="train one mode on one fold")
    p.add_argument("--mode", required=True,
                   choices=["fvgg", "roi", "single_au", "roi_lstm1", "roi_lstm2", "roi_lstm3",
                            "transfer"])
    p.add_argument("--data", required=True, help="dataset directory or manifest path")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--folds", type=int, default=3)
    p.add_argument("--fold-seed", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="JSON config file; flags override its values")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--freeze-stages", type=int, default=None)
    p.add_argument("--source-checkpoint", default=None, help="transfer mode source model")
    p.add_argument("--init-checkpoint", default=None, help="warm-start parameters from here")
    p.add_argument("--transfer-temporal", action="store_true")

    p = sub.add_parser("eval", help="score a checkpoint on a held-out fold")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--folds", type=int, default=3)
    p.add_argument("--fold-seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", default=None, help="directory for metrics files (default: stdout only)")

    p = sub.add_parser("gradcheck", help="finite-difference checks for all ops and full models")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=20, help="number of random seeds per check")

    p = sub.add_parser("report", help="aggregate eval metrics under a directory")
    p.add_argument("--runs", required=True, help="directory tree holding metrics.json files")
    p.add_argument("--out", default=None, help="write the table here (plus .json sidecar)")
    return parser


def _load_json_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _echo(payload: dict) -> None:
    print(json.dumps(payload, indent=1, sort_keys=True))


def _cmd_synth(args) -> int:
    from .synth import SynthConfig, generate_dataset

    config = SynthConfig(subjects=args.subjects, sessions=args.sessions, frames=args.frames,
                         image_size=(args.image_size, args.image_size))
    _echo({"command": "synth", "seed": args.seed, "out": args.out,
           "config": {"subjects": config.subjects, "sessions": config.sessions,
                      "frames": config.frames, "image_size": list(config.image_size)}})
    manifest = generate_dataset(config, args.seed, args.out)
    print(f"wrote {manifest}")
    return EXIT_OK


def _dataset_path(data: str) -> str:
    return data if data.endswith(".json") else os.path.join(data, "manifest.json")


def _cmd_train(args) -> int:
    from .data import load_dataset
    from .model import ModelConfig
    from .train import STATUS_COMPLETED, TrainConfig, train_run

    file_cfg = _load_json_config(args.config) if args.config else {}
    train_kv = dict(file_cfg.get("train", {}))
    model_kv = dict(file_cfg.get("model", {}))
    train_kv["mode"] = args.mode
    train_kv["seed"] = args.seed
    overrides = {
        "lr": args.lr, "momentum": args.momentum, "batch_size": args.batch_size,
        "max_iterations": args.iterations, "freeze_stages": args.freeze_stages,
        "source_checkpoint": args.source_checkpoint, "init_checkpoint": args.init_checkpoint,
    }
    for key, value in overrides.items():
        if value is not None:
            train_kv[key] = value
    if args.transfer_temporal:
        train_kv["transfer_temporal"] = True
    train_cfg = TrainConfig(**train_kv)
    model_cfg = ModelConfig(**model_kv)
    _echo({"command": "train", "fold": args.fold, "folds": args.folds,
           "fold_seed": args.fold_seed, "seed": args.seed,
           "train_config": asdict(train_cfg), "model_config": asdict(model_cfg)})
    dataset = load_dataset(_dataset_path(args.data))
    summary = train_run(train_cfg, model_cfg, dataset, args.out, fold=args.fold,
                        folds=args.folds, fold_seed=args.fold_seed)
    print(f"status {summary['status']}, final loss {summary['final_loss']}")
    return EXIT_OK if summary["status"] == STATUS_COMPLETED else EXIT_RUNTIME


def _cmd_eval(args) -> int:
    from .data import load_dataset
    from .evaluate import evaluate_checkpoint, metrics_table, write_metrics

    _echo({"command": "eval", "checkpoint": args.checkpoint, "fold": args.fold,
           "folds": args.folds, "fold_seed": args.fold_seed, "threshold": args.threshold})
    dataset = load_dataset(_dataset_path(args.data))
    record = evaluate_checkpoint(args.checkpoint, dataset, args.fold, args.folds,
                                 args.fold_seed, args.threshold)
    print(metrics_table(record))
    if args.out:
        write_metrics(args.out, record)
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .checks import battery_report, run_battery

    _echo({"command": "gradcheck", "seed": args.seed, "seeds": args.seeds})
    results = run_battery(seed=args.seed, seeds=args.seeds)
    print(battery_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def _cmd_report(args) -> int:
    from .reports import render_report, write_report

    _echo({"command": "report", "runs": args.runs, "out": args.out})
    payload = write_report(args.runs, args.out)
    from .reports import aggregate_by_mode, collect_metric_records

    print(render_report(aggregate_by_mode(collect_metric_records(args.runs))))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    handlers = {
        "synth": _cmd_synth,
        "train": _cmd_train,
        "eval": _cmd_eval,
        "gradcheck": _cmd_gradcheck,
        "report": _cmd_report,
    }
    try:
        return handlers[args.command](args)
    except (ValueError, OSError, RuntimeError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
