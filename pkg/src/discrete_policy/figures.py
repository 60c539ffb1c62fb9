"""Figure rendering for training curves, evaluation summaries, and latent
maps. Uses the Agg backend and strips the encoder's software tag so repeated
runs produce byte-identical PNG files."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_SAVE_KW = {"dpi": 110, "metadata": {"Software": None}}


def _finish(fig, out_path: str | Path) -> None:
    fig.tight_layout()
    fig.savefig(out_path, **_SAVE_KW)
    plt.close(fig)


def save_loss_curves(metrics: list[dict], out_path: str | Path, title: str) -> None:
    """Line plot of every numeric series in per-step metric entries."""
    rows = [m for m in metrics if "step" in m]
    steps = [m["step"] for m in rows]
    series: dict[str, list] = {}
    for m in rows:
        for key, value in m.items():
            if key in ("step", "stage") or not isinstance(value, (int, float)):
                continue
            series.setdefault(key, []).append((m["step"], value))
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    for key in sorted(series):
        pts = series[key]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], label=key, linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    if series:
        ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    if steps:
        ax.set_xlim(min(steps), max(max(steps), 1))
    _finish(fig, out_path)


def save_success_bars(per_task: dict[str, dict], average: float,
                      out_path: str | Path, title: str) -> None:
    """Per-task success-rate bars with the average drawn as a dashed line.

    `per_task` maps task labels to dicts carrying a `success_rate` entry.
    """
    labels = list(per_task)
    rates = [per_task[k]["success_rate"] for k in labels]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.7 * len(labels) + 1.5), 3.4))
    xs = np.arange(len(labels))
    ax.bar(xs, rates, color="#4878cf", width=0.65)
    ax.axhline(average, color="#d65f5f", linestyle="--", linewidth=1.0,
               label=f"average {average:.2f}")
    ax.set_xticks(xs)
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("success rate")
    ax.set_title(title)
    ax.legend(fontsize=8)
    _finish(fig, out_path)


def save_latent_scatter(coords: np.ndarray, task_ids: np.ndarray,
                        out_path: str | Path, title: str) -> None:
    """2-D scatter of projected latents, colored by task."""
    coords = np.asarray(coords, dtype=np.float64)
    task_ids = np.asarray(task_ids)
    fig, ax = plt.subplots(figsize=(5.0, 4.2))
    cmap = plt.get_cmap("tab20")
    for i, tid in enumerate(sorted(set(int(t) for t in task_ids))):
        mask = task_ids == tid
        ax.scatter(coords[mask, 0], coords[mask, 1], s=9, alpha=0.7,
                   color=cmap(i % 20), label=f"T{tid}")
    ax.set_xlabel("pc 1")
    ax.set_ylabel("pc 2")
    ax.set_title(title)
    ax.legend(fontsize=7, markerscale=1.4, ncol=2)
    _finish(fig, out_path)
