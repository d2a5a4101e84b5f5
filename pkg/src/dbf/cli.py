"""Command-line entry point: synth, train, eval, ablate, attn-stats.

Exit status is 0 on success, 1 for usage or configuration errors and 2 for
runtime failures (non-finite values, unreadable or malformed files).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from dbf.analysis import model_sharpness
from dbf.config import load_run_config
from dbf.data import generate, read_jsonl, split, write_jsonl
from dbf.errors import ConfigError, DBFError
from dbf.train import (
    evaluate,
    load_checkpoint,
    run_ablation_matrix,
    save_checkpoint,
    train,
    write_text_atomic,
)

log = logging.getLogger("dbf")

SUBCOMMANDS = ("synth", "train", "eval", "ablate", "attn-stats")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser, data_help: str | None = None) -> None:
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    if data_help:
        p.add_argument("--data", type=Path, required=True, help=data_help)
    p.add_argument("overrides", nargs="*", metavar="key=value",
                   help="config overrides; dotted keys reach ablation.* and data.*")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dbf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset (train/val/test JSONL)")
    _common(p)
    p.add_argument("--split", default="0.7,0.15,0.15", help="train,val,test fractions")

    p = sub.add_parser("train", help="train a model on a synth output directory")
    _common(p, "directory holding train.jsonl, val.jsonl and test.jsonl")

    p = sub.add_parser("eval", help="evaluate a checkpoint on one dataset file")
    _common(p, "dataset JSONL file")
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("ablate", help="run the eight-row ablation matrix")
    _common(p, "directory holding train.jsonl, val.jsonl and test.jsonl")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds (at least 3)")

    p = sub.add_parser("attn-stats", help="frame-saliency sharpness of one or more checkpoints")
    _common(p, "dataset JSONL file")
    p.add_argument("--checkpoint", action="append", required=True, metavar="[LABEL=]PATH",
                   help="repeatable; label defaults to the file stem")
    p.add_argument("--layer", type=int, default=None,
                   help="fusion layer index (default: last layer whose visual attention feeds Z)")
    return parser


def _load_splits(directory: Path):
    return tuple(read_jsonl(directory / f"{name}.jsonl") for name in ("train", "val", "test"))


def _write(path: Path, text: str) -> None:
    write_text_atomic(path, text)
    log.info("wrote %s", path)


def cmd_synth(args) -> None:
    run = load_run_config(args.config, args.overrides, args.seed)
    try:
        fractions = tuple(float(x) for x in args.split.split(","))
    except ValueError:
        raise ConfigError(f"--split must be three comma-separated fractions, got {args.split!r}")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError("--split needs three fractions summing to 1")
    dataset = generate(run.data)
    for name, part in zip(("train", "val", "test"), split(dataset, fractions)):
        write_jsonl(part, args.out / f"{name}.jsonl")
    _write(args.out / "data_spec.json", json.dumps(run.data.to_dict(), sort_keys=True, indent=2) + "\n")


def cmd_train(args) -> None:
    run = load_run_config(args.config, args.overrides, args.seed)
    train_set, val_set, test_set = _load_splits(args.data)
    result = train(run.train, train_set, val_set, test_set,
                   on_epoch=lambda e: log.info(e.to_line()))
    save_checkpoint(args.out / "model.ckpt", result.model, {"best_epoch": result.best_epoch})
    _write(args.out / "train_log.tsv", result.log_text())
    for split_name, report in result.metrics.items():
        _write(args.out / f"metrics_{split_name}.txt", report.to_text())
    _write(args.out / "config.json", json.dumps(run.train.to_dict(), sort_keys=True, indent=2) + "\n")


def cmd_eval(args) -> None:
    if args.config is not None or args.overrides:
        load_run_config(args.config, args.overrides, args.seed)  # validated, not used
    model, _ = load_checkpoint(args.checkpoint)
    report = evaluate(model, read_jsonl(args.data), model.config.eval_batch_size)
    _write(args.out / "metrics.txt", report.to_text())


def cmd_ablate(args) -> None:
    run = load_run_config(args.config, args.overrides, args.seed)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}")
    table = run_ablation_matrix(run.train, _load_splits(args.data), seeds)
    _write(args.out / "ablation.tsv", table.to_tsv())
    lines = ["config\tseed\tstatus\ttest_mae"]
    for c in table.cells:
        status = "ok" if c.report is not None else f"failed: {c.error}"
        mae = repr(c.report.mae) if c.report is not None else "nan"
        lines.append(f"{c.name}\t{c.seed}\t{status}\t{mae}")
    _write(args.out / "ablation_cells.tsv", "\n".join(lines) + "\n")


def cmd_attn_stats(args) -> None:
    if args.config is not None or args.overrides:
        load_run_config(args.config, args.overrides, args.seed)
    dataset = read_jsonl(args.data)
    summary = ["label\tstd_dev\tnormalized_entropy\tn_samples"]
    for spec in args.checkpoint:
        label, sep, path = spec.partition("=")
        if not sep:
            label, path = Path(spec).stem, spec
        model, _ = load_checkpoint(Path(path))
        report = model_sharpness(model, dataset, label, args.layer)
        _write(args.out / f"sharpness_{label}.txt", report.to_text())
        _write(args.out / f"saliency_{label}.tsv", report.series_tsv())
        summary.append(f"{label}\t{report.std_dev!r}\t{report.normalized_entropy!r}\t{report.n_samples}")
    _write(args.out / "sharpness.tsv", "\n".join(summary) + "\n")


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "attn-stats": cmd_attn_stats,
}


def cli_main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"dbf {args.command}: configuration error: {exc}", file=sys.stderr)
        return 1
    except (DBFError, OSError, KeyError) as exc:
        print(f"dbf {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
