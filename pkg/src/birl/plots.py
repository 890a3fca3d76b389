"""Figure rendering for grid results: grouped bar charts per environment
and metric, with seed spread as error bars."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["render_figures"]

AGENT_ORDER = ("bi", "ei", "fa", "oracle")
AGENT_LABELS = {"bi": "BI-PPO", "ei": "EI-PPO", "fa": "FA-PPO",
                "oracle": "PPO (true state)"}


def render_figures(rows: list[dict], out_dir) -> list[Path]:
    """One PNG per (env, metric): x axis is the (eta, sigma) setting, bars
    are agents, error bars show +-1 std over seeds."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_panel: dict[tuple, list[dict]] = {}
    for row in rows:
        by_panel.setdefault((row["env"], row["metric"]), []).append(row)

    written = []
    for (env, metric), panel_rows in sorted(by_panel.items()):
        settings = sorted({(r["eta"], r["sigma"]) for r in panel_rows})
        agents = [a for a in AGENT_ORDER
                  if any(r["agent"] == a for r in panel_rows)]
        agents += sorted({r["agent"] for r in panel_rows} - set(agents))
        fig, ax = plt.subplots(figsize=(1.8 + 1.4 * len(settings), 3.6))
        width = 0.8 / max(len(agents), 1)
        xs = np.arange(len(settings))
        for k, agent in enumerate(agents):
            means, stds = [], []
            for setting in settings:
                vals = [float(r["value"]) for r in panel_rows
                        if r["agent"] == agent
                        and (r["eta"], r["sigma"]) == setting]
                means.append(np.mean(vals) if vals else np.nan)
                stds.append(np.std(vals) if vals else 0.0)
            offset = (k - (len(agents) - 1) / 2) * width
            ax.bar(xs + offset, means, width, yerr=stds, capsize=3,
                   label=AGENT_LABELS.get(agent, agent))
        ax.set_xticks(xs)
        ax.set_xticklabels([f"$\\eta$={e:g}\n$\\sigma$={s:g}"
                            for e, s in settings])
        ax.set_ylabel(metric.replace("_", " "))
        ax.set_title(env)
        ax.legend(fontsize=8)
        ax.grid(axis="y", alpha=0.3)
        fig.tight_layout()
        path = out_dir / f"fig_{env}_{metric}.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)
    return written
