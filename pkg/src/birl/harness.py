"""Experiment harness: run directories, metrics logging, grids, plot data.

Run layout (one directory per run id):

    config.yaml        frozen copy of the resolved run configuration
    metrics.jsonl      one self-describing record per training iteration
                       (fully deterministic for a given config + seed)
    timing.jsonl       wall-clock per iteration (kept apart from metrics so
                       metrics files are reproducible bit for bit)
    checkpoints/       best.npz and last.npz parameter dumps
    summary.json       final evaluation of the best checkpoint
    diagnostics.json   written only when training aborts

A completed run is identified by its summary; re-invoking it is a no-op.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from .agents import Trainer, evaluate, make_pipeline
from .config import ExperimentConfig, Hyperparams, RunConfig
from .envs import CorruptionConfig, ObservationCorruptor, calibrate_xi, make_env
from .rl import JointNetworks, TrainingAbort

__all__ = [
    "RunFailure",
    "default_out_root",
    "run_experiment",
    "evaluate_run",
    "run_grid",
    "emit_plot_data",
    "PLOT_COLUMNS",
    "SUMMARY_METRICS",
]

OUT_DIR_ENV_VAR = "BIRL_OUT_DIR"
COEFF_SEED = 1234        # missingness coefficients: drawn once per experiment
CALIBRATION_SEED = 77    # xi calibration stream, shared across runs
CALIBRATION_STEPS = 3000
EVAL_SEED_BASE = 10_000_000

PLOT_COLUMNS = ("agent", "env", "eta", "sigma", "seed", "metric", "value")
SUMMARY_METRICS = ("eval_reward_mean", "eval_reward_std",
                   "imputed_state_mse", "best_train_reward")


class RunFailure(RuntimeError):
    """A training run aborted; diagnostics were written to the run dir."""


def default_out_root(override=None) -> Path:
    if override:
        return Path(override)
    return Path(os.environ.get(OUT_DIR_ENV_VAR, "runs"))


def _prepare_corruption(run: RunConfig, env) -> CorruptionConfig:
    corruption = CorruptionConfig.create(
        run.mechanism, run.eta, run.sigma, env.state_dim, env.action_dim,
        coeff_seed=COEFF_SEED)
    if corruption.xi is None:
        corruption = calibrate_xi(env, corruption, n_steps=CALIBRATION_STEPS,
                                  seed=CALIBRATION_SEED)
    return corruption


def _record_line(path: Path, record: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _sanitize(value: float) -> float | None:
    return None if not np.isfinite(value) else float(value)


def run_experiment(run: RunConfig, out_root=None) -> Path:
    """Train one configuration, checkpointing every iteration, then evaluate
    the best checkpoint for hp.eval_episodes episodes.

    Idempotent: if the run directory already holds a completed summary the
    run is skipped.  Raises RunFailure (after dumping diagnostics) when
    training aborts on non-finite losses.
    """
    run.validate()
    out_root = default_out_root(out_root)
    run_dir = out_root / run.run_id()
    summary_path = run_dir / "summary.json"
    if summary_path.exists():
        with open(summary_path, encoding="utf-8") as fh:
            if json.load(fh).get("status") == "complete":
                return run_dir

    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "checkpoints").mkdir(exist_ok=True)
    with open(run_dir / "config.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(run.to_dict(), fh, sort_keys=True)
    metrics_path = run_dir / "metrics.jsonl"
    timing_path = run_dir / "timing.jsonl"
    for stale in (metrics_path, timing_path):
        if stale.exists():
            stale.unlink()

    t_start = time.perf_counter()
    seq = np.random.SeedSequence(run.seed)
    net_seq, env_seq, corrupt_seq = seq.spawn(3)
    cal_env = make_env(run.env)
    corruption = _prepare_corruption(run, cal_env)

    env = make_env(run.env, seed=None)
    env.reset(seed=int(env_seq.generate_state(1)[0]) % (2 ** 31))
    corruptor = ObservationCorruptor(corruption, np.random.default_rng(corrupt_seq))
    nets = JointNetworks(np.random.default_rng(net_seq), env.state_dim,
                         env.action_dim, run.hp.hidden)
    trainer = Trainer(env, corruptor, nets, run.agent, run.hp, seed=run.seed)
    ckpt_meta = {"env": run.env, "agent": run.agent, "run_id": run.run_id()}

    best_reward = -np.inf
    best_iteration = None
    iterations = run.timesteps // run.hp.horizon
    try:
        for _ in range(iterations):
            stats = trainer.train_iteration()
            record = {"run_id": run.run_id(),
                      "config_hash": run.config_hash(),
                      **stats.to_dict()}
            record["reward_mean"] = _sanitize(stats.reward_mean)
            record["reward_std"] = _sanitize(stats.reward_std)
            _record_line(metrics_path, record)
            _record_line(timing_path, {
                "iteration": stats.iteration,
                "wall_clock_s": time.perf_counter() - t_start,
            })
            nets.save(run_dir / "checkpoints" / "last.npz",
                      {**ckpt_meta, "iteration": stats.iteration})
            if stats.episodes > 0 and stats.reward_mean > best_reward:
                best_reward = stats.reward_mean
                best_iteration = stats.iteration
                nets.save(run_dir / "checkpoints" / "best.npz",
                          {**ckpt_meta, "iteration": stats.iteration})
    except TrainingAbort as exc:
        diagnostics = {"error": str(exc), **exc.diagnostics}
        with open(run_dir / "diagnostics.json", "w", encoding="utf-8") as fh:
            json.dump(diagnostics, fh, indent=2, sort_keys=True, default=str)
        with open(summary_path, "w", encoding="utf-8") as fh:
            json.dump({"status": "aborted", "run_id": run.run_id()}, fh,
                      indent=2, sort_keys=True)
        raise RunFailure(f"training aborted: {exc}") from exc

    best_path = run_dir / "checkpoints" / "best.npz"
    if not best_path.exists():
        nets.save(best_path, {**ckpt_meta, "iteration": trainer.iteration})
        best_iteration = trainer.iteration
    eval_nets, _ = JointNetworks.load(best_path)
    eval_env = make_env(run.env)
    eval_corruptor = ObservationCorruptor(
        corruption, np.random.default_rng(np.random.SeedSequence(run.seed + 1)))
    pipeline = make_pipeline(run.agent, eval_nets, corruption.noise_cov())
    eval_stats = evaluate(eval_env, eval_corruptor, eval_nets, pipeline,
                          run.hp.eval_episodes,
                          seed=EVAL_SEED_BASE + run.seed)

    if iterations == 0:
        # zero-iteration run: record the initial evaluation so the metrics
        # file is never empty
        _record_line(metrics_path, {
            "run_id": run.run_id(), "config_hash": run.config_hash(),
            "iteration": 0, "timestep": 0,
            "reward_mean": _sanitize(eval_stats["reward_mean"]),
            "reward_std": _sanitize(eval_stats["reward_std"]),
            "episodes": eval_stats["episodes"],
            "imputed_state_mse": eval_stats["imputed_state_mse"],
            "loss_policy": None, "loss_value": None, "loss_model": None,
        })

    summary = {
        "status": "complete",
        "run_id": run.run_id(),
        "config_hash": run.config_hash(),
        "env": run.env,
        "agent": run.agent,
        "mechanism": run.mechanism,
        "eta": run.eta,
        "sigma": run.sigma,
        "seed": run.seed,
        "timesteps": trainer.timestep,
        "iterations": trainer.iteration,
        "xi": corruption.xi,
        "best_iteration": best_iteration,
        "best_train_reward": _sanitize(best_reward),
        "eval_reward_mean": eval_stats["reward_mean"],
        "eval_reward_std": eval_stats["reward_std"],
        "imputed_state_mse": eval_stats["imputed_state_mse"],
        "eval_episodes": eval_stats["episodes"],
        "wall_clock_s": time.perf_counter() - t_start,
    }
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return run_dir


def evaluate_run(run_dir, episodes: int | None = None,
                 checkpoint: str = "best", seed: int | None = None) -> dict:
    """Re-evaluate a stored checkpoint under its run's corruption settings."""
    run_dir = Path(run_dir)
    with open(run_dir / "config.yaml", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    hp_data = data.pop("hp")
    hp_data["hidden"] = tuple(hp_data["hidden"])
    run = RunConfig(hp=Hyperparams(**hp_data), **data)
    nets, _ = JointNetworks.load(run_dir / "checkpoints" / f"{checkpoint}.npz")
    env = make_env(run.env)
    corruption = _prepare_corruption(run, make_env(run.env))
    corruptor = ObservationCorruptor(
        corruption, np.random.default_rng(np.random.SeedSequence(run.seed + 1)))
    pipeline = make_pipeline(run.agent, nets, corruption.noise_cov())
    n_eval = episodes or run.hp.eval_episodes
    return evaluate(env, corruptor, nets, pipeline, n_eval,
                    seed=EVAL_SEED_BASE + (seed if seed is not None else run.seed))


def run_grid(config: ExperimentConfig, out_root=None) -> Path:
    """Run every (agent, eta, sigma, seed) cell, then aggregate.

    Cell failures are recorded and do not stop the grid.  Writes a
    mean-and-std summary table plus the long-format plot data (and figures)
    into a grid directory alongside the runs.
    """
    config.validate()
    out_root = default_out_root(out_root)
    grid_hash = hashlib.sha256(
        json.dumps(config.to_dict(), sort_keys=True).encode()).hexdigest()[:12]
    grid_dir = out_root / f"grid-{grid_hash}"
    grid_dir.mkdir(parents=True, exist_ok=True)

    cell_records = []
    run_dirs = []
    for cell in config.cells():
        entry = {"run_id": cell.run_id(), "agent": cell.agent,
                 "eta": cell.eta, "sigma": cell.sigma, "seed": cell.seed}
        try:
            run_dir = run_experiment(cell, out_root)
            run_dirs.append(run_dir)
            entry["status"] = "complete"
            entry["run_dir"] = str(run_dir)
        except Exception as exc:  # cell isolation: record and continue
            entry["status"] = "failed"
            entry["error"] = str(exc)
        cell_records.append(entry)
    with open(grid_dir / "cells.json", "w", encoding="utf-8") as fh:
        json.dump(cell_records, fh, indent=2, sort_keys=True)

    rows = emit_plot_data(run_dirs, grid_dir / "plot_data.csv",
                          figures_dir=grid_dir)
    _write_grid_summary(rows, grid_dir / "grid_summary.csv")
    return grid_dir


def _write_grid_summary(rows: list[dict], path: Path) -> None:
    """Aggregate long-format rows into one line per (agent, env, eta, sigma,
    metric) with mean and std over seeds."""
    groups: dict[tuple, list[float]] = {}
    for row in rows:
        key = (row["agent"], row["env"], row["eta"], row["sigma"], row["metric"])
        groups.setdefault(key, []).append(float(row["value"]))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["agent", "env", "eta", "sigma", "metric",
                         "mean", "std", "n_seeds"])
        for key in sorted(groups):
            vals = np.asarray(groups[key])
            writer.writerow([*key, f"{vals.mean():.10g}", f"{vals.std():.10g}",
                             vals.size])


def emit_plot_data(run_dirs, out_csv, figures_dir=None) -> list[dict]:
    """Collect per-run summary metrics into a long-format delimited file.

    Columns are fixed (agent, env, eta, sigma, seed, metric, value); one row
    per metric per run.  Unreadable run directories are reported on stderr
    per entry and skipped.  When figures_dir is given, bar charts are
    rendered next to the data (one figure per env and metric).
    """
    rows = []
    for run_dir in run_dirs:
        summary_path = Path(run_dir) / "summary.json"
        try:
            with open(summary_path, encoding="utf-8") as fh:
                summary = json.load(fh)
            if summary.get("status") != "complete":
                raise ValueError(f"run status is {summary.get('status')!r}")
            for metric in SUMMARY_METRICS:
                value = summary.get(metric)
                if value is None:
                    continue
                rows.append({
                    "agent": summary["agent"], "env": summary["env"],
                    "eta": summary["eta"], "sigma": summary["sigma"],
                    "seed": summary["seed"], "metric": metric,
                    "value": value,
                })
        except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
            print(f"plot-data: skipping {run_dir}: {exc}", file=sys.stderr)
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(PLOT_COLUMNS))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    if figures_dir is not None and rows:
        from .plots import render_figures
        render_figures(rows, figures_dir)
    return rows
