"""``dat-ctta`` command-line entry point.

Exit codes: 0 success, 2 configuration or contract error, 3 numeric failure,
4 I/O or load error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ..errors import ConfigError, ContractError, LoadError, NonFiniteError, ShapeError
from . import commands
from . import config as config_mod

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("dat_ctta")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dat-ctta", description="Continual test-time adaptation runs on a "
                                "synthetic segmentation benchmark.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint: bool):
        sp.add_argument("--config", type=Path, help="flat key = value config file")
        sp.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
        sp.add_argument("--out", type=Path, help="output directory")
        if checkpoint:
            sp.add_argument("--checkpoint", type=Path, required=True, help="source checkpoint (.datc)")

    common(sub.add_parser("pretrain", help="train the source model on clean scenes"), checkpoint=False)
    sp = sub.add_parser("adapt", help="run one method over the domain stream")
    common(sp, checkpoint=True)
    sp.add_argument("--method", choices=("dat", "source", "full_ft", "norm_only"))
    common(sub.add_parser("ablate", help="component and selection-mode ablations"), checkpoint=True)
    sp = sub.add_parser("sweep", help="mean mIoU against the total parameter budget")
    common(sp, checkpoint=True)
    sp.add_argument("--budgets", type=str, help="comma-separated budgets (overrides sweep.budgets)")
    sp = sub.add_parser("report", help="render a results table from run directories or metrics CSVs")
    sp.add_argument("runs", nargs="+", type=Path)
    sp.add_argument("--out", type=Path, help="also write report.txt / report.json here")
    sub.add_parser("defaults", help="print the default configuration")
    return p


def resolve_config(args) -> config_mod.Config:
    cfg = config_mod.load(args.config) if getattr(args, "config", None) else config_mod.Config()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, run=replace(cfg.run, seed=args.seed))
    if getattr(args, "method", None):
        cfg = replace(cfg, adapt=replace(cfg.adapt, method=args.method))
    return cfg.validate()


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        if args.command == "defaults":
            sys.stdout.write(config_mod.dumps(config_mod.Config()))
            return EXIT_OK
        if args.command == "report":
            text, _ = commands.cmd_report(args.runs, args.out)
            sys.stdout.write(text)
            return EXIT_OK
        cfg = resolve_config(args)
        out = args.out or Path("runs") / args.command
        if args.command == "pretrain":
            info = commands.cmd_pretrain(cfg, out)
            print(f"held-out clean mIoU {info['heldout_miou']:.4f}  acc {info['heldout_acc']:.4f}")
            print(f"checkpoint {info['checkpoint']}")
        elif args.command == "adapt":
            res = commands.cmd_adapt(cfg, args.checkpoint, out)
            text, _ = commands.cmd_report([out])
            sys.stdout.write(text)
            if res.skipped:
                print(f"warning: {res.skipped} frames skipped after non-finite values", file=sys.stderr)
        elif args.command == "ablate":
            commands.cmd_ablate(cfg, args.checkpoint, out)
            for name in ("table3.md", "table4.md"):
                sys.stdout.write((out / name).read_text() + "\n")
        elif args.command == "sweep":
            budgets = None
            if args.budgets:
                budgets = config_mod.parse_value(args.budgets, tuple[float, ...], "--budgets")
            for b, m in commands.cmd_sweep(cfg, args.checkpoint, out, budgets):
                print(f"{b:g}\t{m:.4f}")
    except (ConfigError, ContractError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (LoadError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def main() -> None:
    sys.exit(run())
