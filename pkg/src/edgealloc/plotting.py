"""PNG figures for training curves, evaluation series and sweep comparisons."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

METRIC_LABELS = {
    "overall_qoe": "overall QoE",
    "v_comm": "bitrate variance (Mbps$^2$)",
    "v_comp": "CPU share variance",
    "util_comm": "bandwidth utilization",
    "util_comp": "CPU utilization",
    "reward": "reward",
}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path


def learning_curve(log, path: str | Path, title: str = "") -> Path:
    """Cumulative reward per training episode."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot([r.episode for r in log], [r.cumulative_reward for r in log], lw=1.2)
    ax.set_xlabel("episode")
    ax.set_ylabel("cumulative reward")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    return _save(fig, Path(path))


def eval_series(report, path: str | Path) -> Path:
    """Per-episode evaluation metrics, one panel each."""
    metrics = list(report.per_episode)
    fig, axes = plt.subplots(len(metrics), 1, figsize=(6, 1.8 * len(metrics)), sharex=True)
    for ax, m in zip(axes, metrics):
        ax.plot(report.per_episode[m], marker=".", lw=1)
        ax.set_ylabel(METRIC_LABELS.get(m, m), fontsize=8)
        ax.grid(alpha=0.3)
    axes[-1].set_xlabel("evaluation episode")
    axes[0].set_title(report.method)
    return _save(fig, Path(path))


def sweep_figures(rows, parameter: str, unit: str, out_dir: str | Path) -> list[Path]:
    """One errorbar figure per metric: method lines over the swept values."""
    out_dir = Path(out_dir)
    paths = []
    for metric in dict.fromkeys(r.metric for r in rows):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for method in dict.fromkeys(r.method for r in rows):
            pts = sorted((r.value, r.mean, r.stddev) for r in rows
                         if r.method == method and r.metric == metric)
            if pts:
                xs, ys, es = zip(*pts)
                ax.errorbar(xs, ys, yerr=es, marker="o", capsize=3, label=method)
        ax.set_xlabel(f"{parameter} ({unit})")
        ax.set_ylabel(METRIC_LABELS.get(metric, metric))
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
        paths.append(_save(fig, out_dir / f"compare_{parameter}_{metric}.png"))
    return paths
