"""Command-line interface.

Subcommands: train, evaluate, grid, plot-data, print-config, selftest.
Exit codes: 0 success, 1 selftest failure, 2 invalid configuration,
3 aborted training.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml

from .config import ConfigError, ExperimentConfig, load_config
from .harness import (
    RunFailure,
    default_out_root,
    emit_plot_data,
    evaluate_run,
    run_experiment,
    run_grid,
)

EXIT_BAD_CONFIG = 2
EXIT_TRAIN_ABORT = 3


def _add_common_overrides(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="YAML config file")
    parser.add_argument("--env", help="environment name")
    parser.add_argument("--agent", help="agent name (bi, ei, fa, oracle)")
    parser.add_argument("--eta", type=float, help="missing ratio")
    parser.add_argument("--sigma", type=float, help="noise factor")
    parser.add_argument("--seed", type=int, help="random seed")
    parser.add_argument("--timesteps", type=int, help="total environment steps")
    parser.add_argument("--out", type=Path,
                        help="output root (default: $BIRL_OUT_DIR or ./runs)")


def _resolve_config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    data = config.to_dict()
    if args.env is not None:
        data["env"] = args.env
    if args.agent is not None:
        data["agent"] = args.agent
        data["agents"] = None
    if args.eta is not None:
        data["etas"] = [args.eta]
    if args.sigma is not None:
        data["sigmas"] = [args.sigma]
    if args.seed is not None:
        data["seeds"] = [args.seed]
    if args.timesteps is not None:
        data["timesteps"] = args.timesteps
    return ExperimentConfig.from_dict(data)


def _cmd_train(args) -> int:
    config = _resolve_config(args)
    run = config.first_cell()
    run_dir = run_experiment(run, args.out)
    with open(run_dir / "summary.json", encoding="utf-8") as fh:
        summary = json.load(fh)
    print(f"run directory: {run_dir}")
    print(f"eval reward: {summary['eval_reward_mean']:.2f} "
          f"+- {summary['eval_reward_std']:.2f} "
          f"(imputed-state MSE {summary['imputed_state_mse']:.4g})")
    return 0


def _cmd_evaluate(args) -> int:
    stats = evaluate_run(args.run, episodes=args.episodes,
                         checkpoint=args.checkpoint, seed=args.seed)
    print(json.dumps(stats, indent=2, sort_keys=True))
    return 0


def _cmd_grid(args) -> int:
    config = _resolve_config(args)
    grid_dir = run_grid(config, args.out)
    print(f"grid directory: {grid_dir}")
    with open(grid_dir / "cells.json", encoding="utf-8") as fh:
        cells = json.load(fh)
    failed = [c for c in cells if c["status"] != "complete"]
    print(f"{len(cells) - len(failed)}/{len(cells)} cells complete")
    for cell in failed:
        print(f"  failed: {cell['run_id']}: {cell.get('error', '?')}")
    return 0


def _cmd_plot_data(args) -> int:
    out_csv = args.out_file
    if out_csv is None:
        out_csv = default_out_root(args.out) / "plot_data.csv"
    figures_dir = None if args.no_figures else Path(out_csv).parent
    rows = emit_plot_data(args.runs, out_csv, figures_dir=figures_dir)
    print(f"wrote {len(rows)} rows to {out_csv}")
    return 0


def _cmd_print_config(args) -> int:
    config = _resolve_config(args)
    yaml.safe_dump(config.to_dict(), sys.stdout, sort_keys=True)
    return 0


def _cmd_selftest(args) -> int:
    from .selftest import run_selftest
    failures = run_selftest()
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="birl",
        description="Belief-imputation RL under noisy, partially missing "
                    "observations",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one configuration")
    _add_common_overrides(p_train)
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("evaluate", help="evaluate a stored checkpoint")
    p_eval.add_argument("--run", type=Path, required=True,
                        help="run directory")
    p_eval.add_argument("--episodes", type=int, default=None)
    p_eval.add_argument("--checkpoint", choices=("best", "last"),
                        default="best")
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.set_defaults(func=_cmd_evaluate)

    p_grid = sub.add_parser("grid", help="run an (agent, eta, sigma, seed) grid")
    _add_common_overrides(p_grid)
    p_grid.set_defaults(func=_cmd_grid)

    p_plot = sub.add_parser("plot-data",
                            help="aggregate runs into plot data and figures")
    p_plot.add_argument("runs", nargs="*", type=Path, help="run directories")
    p_plot.add_argument("--out-file", type=Path, default=None,
                        help="output CSV path")
    p_plot.add_argument("--out", type=Path, default=None,
                        help="output root when --out-file is not given")
    p_plot.add_argument("--no-figures", action="store_true")
    p_plot.set_defaults(func=_cmd_plot_data)

    p_print = sub.add_parser("print-config",
                             help="print the resolved configuration")
    _add_common_overrides(p_print)
    p_print.set_defaults(func=_cmd_print_config)

    p_self = sub.add_parser("selftest", help="run the built-in oracle checks")
    p_self.set_defaults(func=_cmd_selftest)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except RunFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAIN_ABORT


if __name__ == "__main__":
    sys.exit(main())
