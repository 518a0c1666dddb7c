"""Command-line entry point: ``spectrobust <subcommand> --config C --out DIR [--seed S]``.

Subcommands:

``train``    train every configured model and save its checkpoint
``attack``   attack the selected test images at ``attack.lam``
``sweep``    run the full lambda sweep plus FGSM/PGD baselines
``analyze``  region histograms, linearity, reduction, recombination, attention
``report``   ASR curves and sweep statistics from an existing sweep directory
``run``      all of the above in order

The worker count for per-image attacks comes from ``SPECTROBUST_WORKERS``.
The exit status is 0 only when every stage succeeded.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from typing import Optional, Sequence

from . import __version__
from .config import ConfigError, load_config
from .experiment import SUBCOMMAND_STAGES, ingest_dataset, run_experiment

__all__ = ["build_parser", "ingest_dataset", "main"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spectrobust", description="Frequency-domain adversarial attack experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMAND_STAGES:
        p = sub.add_parser(name, help=f"run the {name} stage(s)")
        p.add_argument("--config", help="YAML experiment config (defaults used when omitted)")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"spectrobust: config error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.out:
        cfg = dataclasses.replace(cfg, output_dir=args.out)
    manifest = run_experiment(cfg, command=args.command, out_dir=cfg.output_dir)
    for stage in manifest.stages:
        line = f"{stage.name:10s} {stage.status}"
        if stage.error:
            line += f"  {stage.error}"
        print(line)
    print(f"manifest: {cfg.output_dir}/manifest.json")
    return 0 if manifest.ok else 1


if __name__ == "__main__":
    sys.exit(main())
