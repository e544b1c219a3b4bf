"""Render training-run figures next to the metrics CSV."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import ConfigError


def load_metrics(path) -> dict:
    """Parse metrics.csv into column lists ('' becomes None)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols: dict = {name: [] for name in reader.fieldnames}
        for row in reader:
            for name, value in row.items():
                if name == "loss_mode":
                    cols[name].append(value)
                elif value == "":
                    cols[name].append(None)
                else:
                    cols[name].append(float(value))
    return cols


def render_run(run_dir, out_dir=None) -> list:
    """Write reward/loss/epsilon PNGs for a run; returns written paths."""
    run_dir = Path(run_dir)
    metrics_path = run_dir / "metrics.csv"
    if not metrics_path.exists():
        raise ConfigError(f"no metrics.csv under {run_dir}")
    out_dir = Path(out_dir) if out_dir is not None else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    cols = load_metrics(metrics_path)
    ep = cols["episode"]
    written = []

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(ep, cols["total_reward"], lw=0.8, alpha=0.6, label="episode reward")
    evals = [(e, v) for e, v in zip(ep, cols["eval_avg_reward"]) if v is not None]
    if evals:
        ax.plot(*zip(*evals), "o-", ms=4, label="eval avg reward")
    ax.set_xlabel("episode")
    ax.set_ylabel("reward")
    ax.legend()
    fig.tight_layout()
    path = out_dir / "reward.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(str(path))

    fig, ax = plt.subplots(figsize=(7, 4))
    losses = [(e, v) for e, v in zip(ep, cols["mean_loss"]) if v is not None]
    if losses:
        ax.plot(*zip(*losses), lw=0.8)
    ax.set_xlabel("episode")
    ax.set_ylabel("mean loss")
    fig.tight_layout()
    path = out_dir / "loss.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(str(path))

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(ep, cols["epsilon"], lw=1.0)
    ax.set_xlabel("episode")
    ax.set_ylabel("epsilon")
    fig.tight_layout()
    path = out_dir / "epsilon.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(str(path))
    return written


def render_bench(rows: list, out_dir) -> str:
    """Bar chart of per-variant forward / forward+backward timings."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = [r["variant"] for r in rows]
    fwd = [r["forward_ms_mean"] for r in rows]
    bwd = [r["train_ms_mean"] for r in rows]
    x = range(len(names))
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar([i - 0.2 for i in x], fwd, width=0.4, label="forward")
    ax.bar([i + 0.2 for i in x], bwd, width=0.4, label="forward+backward")
    ax.set_xticks(list(x))
    ax.set_xticklabels(names, rotation=20)
    ax.set_ylabel("ms per batch")
    ax.legend()
    fig.tight_layout()
    path = out_dir / "bench.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)
