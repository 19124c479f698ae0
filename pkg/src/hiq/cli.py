"""Command-line interface: ``hiq {train,eval,ablate,init-queries,gen-data}``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import ConfigError, TrainConfig, dump_config, load_config, set_value
from .data import build_datasets, compute_stats, export_dataset, normalize_batch
from .querybank import init_eigen_queries

logger = logging.getLogger("hiq")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser, out_default: str) -> None:
    p.add_argument("--config", help="sectioned key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. model.d_q=32 (repeatable)")
    p.add_argument("--out", default=out_default, help="output directory (default: %(default)s)")
    p.add_argument("--seed", type=int, help="training seed (train.seed)")
    p.add_argument("--no-cfl", action="store_true", help="disable the cluster focal loss terms")
    p.add_argument("--no-camp", action="store_true", help="disable the CAMP head and its BCE term")
    p.add_argument("--no-eigen", action="store_true", help="use random instead of PCA query initialisation")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hiq", description="Hierarchical scalable-query image classification.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    _common(sub.add_parser("train", help="train a model; writes checkpoint, metrics and curves"), "runs/train")
    p = sub.add_parser("eval", help="evaluate a checkpoint; prints one metrics record")
    _common(p, "runs/eval")
    p.add_argument("--checkpoint", required=True, help="checkpoint file written by train")
    _common(sub.add_parser("ablate", help="run the ablation matrix over seeds 1,2,3"), "runs/ablate")
    _common(sub.add_parser("init-queries", help="compute PCA query maps and their report"), "runs/queries")
    _common(sub.add_parser("gen-data", help="write the synthetic dataset as PPM images and CSV manifests"), "data/synthetic")
    return parser


def effective_config(args, base: TrainConfig | None = None) -> TrainConfig:
    cfg = load_config(args.config) if args.config else (base or TrainConfig())
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            set_value(cfg, key.strip(), value)
        except ConfigError as exc:
            raise UsageError(str(exc)) from exc
    if args.seed is not None:
        cfg.seed = args.seed
    if args.no_cfl:
        cfg.cfl = False
    if args.no_camp:
        cfg.camp = False
    if args.no_eigen:
        cfg.eigen_init = False
    try:
        cfg.validate()
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def _echo_config(cfg: TrainConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(dump_config(cfg), encoding="utf-8")
    logger.info("effective config written to %s", out / "config.cfg")


def cmd_train(args) -> int:
    from .plotting import plot_training_curves
    from .trainer import train

    cfg = effective_config(args)
    out = Path(args.out)
    _echo_config(cfg, out)
    result = train(cfg, out)
    if result.records:
        plot_training_curves(result.records, out / "curves.png")
        print(result.records[-1].to_json())
    logger.info("checkpoint: %s", result.checkpoint_path)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .trainer import evaluate

    ckpt = load_checkpoint(args.checkpoint)
    cfg = effective_config(args, base=ckpt.cfg)
    out = Path(args.out)
    _echo_config(cfg, out)
    h, train_ds, test_ds = build_datasets(cfg.data, ckpt.cfg.model.input_size)
    ds, split = (test_ds, "test") if len(test_ds) else (train_ds, "train")
    record = evaluate(ckpt.model, ds, ckpt.stats, cfg.camp, ckpt.cfg.model.camp_lambda, seed=ckpt.cfg.seed, split=split)
    line = record.to_json()
    (out / "eval.json").write_text(line + "\n", encoding="utf-8")
    print(line)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .trainer import run_ablation

    cfg = effective_config(args)
    out = Path(args.out)
    _echo_config(cfg, out)
    report = run_ablation(cfg, out)
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def cmd_init_queries(args) -> int:
    from .plotting import plot_query_maps

    cfg = effective_config(args)
    out = Path(args.out)
    _echo_config(cfg, out)
    h, train_ds, _ = build_datasets(cfg.data, cfg.model.input_size)
    stats = compute_stats(train_ds)
    bank, report = init_eigen_queries([normalize_batch(x, stats) for x in train_ds.by_fine_class()], h, cfg.model)
    np.savez(out / "queries.npz", q1=bank.q1.data, q2_base=bank.q2_base.data)
    (out / "eigen_report.json").write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")
    plot_query_maps(bank.q1.data, bank.q2_base.data, out / "queries.png", list(h.coarse_names))
    print(json.dumps({"queries": str(out / "queries.npz"), "fallback_classes": report.n_fallback}))
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = effective_config(args)
    out = Path(args.out)
    _echo_config(cfg, out)
    h, train_ds, test_ds = build_datasets(cfg.data, cfg.model.input_size)
    (out / "taxonomy.txt").write_text(h.to_text(), encoding="utf-8")
    paths = {split: str(export_dataset(ds, out, split)) for split, ds in (("train", train_ds), ("test", test_ds))}
    print(json.dumps({"taxonomy": str(out / "taxonomy.txt"), **paths, "n_train": len(train_ds), "n_test": len(test_ds)}))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "init-queries": cmd_init_queries,
    "gen-data": cmd_gen_data,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"hiq: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"hiq: I/O error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"hiq: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    sys.exit(run())


if __name__ == "__main__":
    main()
