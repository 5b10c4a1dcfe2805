#!/usr/bin/env python3
"""
Contract lab: train and compare contract-generating policies for a typed
AIGC service market.

Subcommands:
- train-diffusion / train-ppo: train per seed; writes curves.csv, contracts.csv,
  checkpoints/ and manifest.txt into --out
- oracle: contract table of oracle menus on the fixed contract states
- eval: score a checkpoint (or "oracle") on freshly seeded states
- compare: final-window and convergence summary of two or more curve files
- plot: curves.svg (and contracts.svg) from the CSVs

Exit codes: 0 success, 2 configuration error, 3 data error.

Usage:
  python3 contract_lab.py train-diffusion --config configs/default.yaml --seed 0,1,2 --out runs/diffusion
  python3 contract_lab.py train-ppo --config configs/default.yaml --seed 0,1,2 --out runs/ppo
  python3 contract_lab.py compare runs/diffusion/curves.csv runs/ppo/curves.csv --out runs/compare
  python3 contract_lab.py eval --checkpoint runs/diffusion/checkpoints/diffusion_seed0.npz --count 1000 --out runs/eval
  python3 contract_lab.py plot --curves runs/diffusion/curves.csv runs/ppo/curves.csv --contracts runs/diffusion/contracts.csv --out runs/plots
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import List, Optional

sys.path.append(os.path.join(os.path.dirname(os.path.abspath(__file__)), 'app'))

from config import default_config, load_config  # noqa: E402
from harness import compare, evaluate, run, write_evaluation  # noqa: E402
from helpers import ConfigError, DataError, parse_seed_list  # noqa: E402
from plots import emit_plots  # noqa: E402

logger = logging.getLogger("contract_lab")

TRAIN_COMMANDS = {"train-diffusion": "diffusion", "train-ppo": "ppo", "oracle": "oracle"}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="Flat dotted-key YAML config (defaults built in when omitted)")
    p.add_argument("--seed", help="Comma separated seeds (eval: the evaluation-state seed)")
    p.add_argument("--out", help="Output directory")
    p.add_argument("--steps", type=int, help="Environment-step budget per seed")
    p.add_argument("--force", action="store_true", help="Overwrite an existing manifest")
    p.add_argument("--verbose", action="store_true", help="Debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Diffusion vs PPO contract generation experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in TRAIN_COMMANDS:
        _add_common(sub.add_parser(name, help=f"{name} run"))

    p_eval = sub.add_parser("eval", help="Evaluate a checkpoint or the oracle")
    _add_common(p_eval)
    p_eval.add_argument("--checkpoint", required=True, help="Checkpoint .npz path, or 'oracle'")
    p_eval.add_argument("--count", type=int, default=1000, help="Number of evaluation states")

    p_cmp = sub.add_parser("compare", help="Compare curve files")
    _add_common(p_cmp)
    p_cmp.add_argument("curves", nargs="+", help="curves.csv files")
    p_cmp.add_argument("--final-window", type=int, help="Eval rows averaged per seed at the end of training")

    p_plot = sub.add_parser("plot", help="Render SVG figures")
    _add_common(p_plot)
    p_plot.add_argument("--curves", required=True, nargs="+", help="One or more curves.csv paths")
    p_plot.add_argument("--contracts", help="contracts.csv path")
    return parser


def _config(args):
    config = load_config(args.config) if args.config else default_config()
    changes = {}
    if args.seed is not None and args.command != "eval":
        changes["seeds"] = tuple(parse_seed_list(args.seed))
    if args.steps is not None:
        changes["steps"] = args.steps
    if args.out is not None:
        changes["out_dir"] = args.out
    if args.command in TRAIN_COMMANDS:
        changes["algo"] = TRAIN_COMMANDS[args.command]
    return config.with_experiment(**changes) if changes else config


def dispatch(args) -> None:
    config = _config(args)
    exp = config.experiment
    if args.command in TRAIN_COMMANDS:
        run(config, force=args.force)
    elif args.command == "eval":
        seeds = parse_seed_list(args.seed) if args.seed is not None else [exp.eval_seed]
        record = evaluate(config, args.checkpoint, seeds[0], args.count)
        write_evaluation(record, args.out or f"{exp.out_dir}/eval")
        for key, value in record.summary().items():
            print(f"{key}: {value}")
    elif args.command == "compare":
        result = compare(args.curves, args.out or exp.out_dir, args.final_window or exp.final_window)
        print(result.table.to_string(index=False))
        print(result.verdict)
    elif args.command == "plot":
        for path in emit_plots(args.curves, args.out or exp.out_dir, args.contracts):
            print(path)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s',
    )
    try:
        dispatch(args)
    except ConfigError as exc:
        logger.error(f"❌ Config error: {exc}")
        return 2
    except DataError as exc:
        logger.error(f"❌ Data error: {exc}")
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
