"""Sample-size curves rendered to self-contained SVG files.

One figure per (metric, split): x is the number of labeled training
sessions on a log scale, y the metric mean over seeds with a +-1 std
band, one series per method. Output is byte-deterministic for identical
input (fixed hash salt, no embedded timestamps).
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import AggregateRecord, EvalRecord, aggregate  # noqa: E402

_COLORS = {
    "supervised": "#d62728",
    "pretrain_finetune": "#1f77b4",
    "few_shot": "#2ca02c",
}
_LABELS = {
    "supervised": "supervised",
    "pretrain_finetune": "pretrain + finetune",
    "few_shot": "few-shot (gated blocks)",
}

METRICS = ("auc_pr", "auc_roc")
SPLITS = ("in_domain", "out_of_domain")


def _series(aggs: list[AggregateRecord], method: str, split: str, metric: str):
    rows = sorted(
        (a for a in aggs if a.method == method and a.split == split),
        key=lambda a: a.n_labeled,
    )
    xs = [a.n_labeled for a in rows]
    means = [getattr(a, f"mean_{metric}") for a in rows]
    stds = [getattr(a, f"std_{metric}") for a in rows]
    return xs, means, stds


def render_chart(aggs: list[AggregateRecord], metric: str, split: str,
                 config_hash: str = ""):
    """Build one figure: log-x sample-size curves with +-1 std bands."""
    methods = sorted({a.method for a in aggs})
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    for method in methods:
        xs, means, stds = _series(aggs, method, split, metric)
        if not xs:
            continue
        color = _COLORS.get(method)
        label = _LABELS.get(method, method)
        ax.plot(xs, means, marker="o", color=color, label=label)
        lo = [mu - sd for mu, sd in zip(means, stds)]
        hi = [mu + sd for mu, sd in zip(means, stds)]
        ax.fill_between(xs, lo, hi, color=color, alpha=0.18, linewidth=0)
    ax.set_xscale("log")
    ax.set_xlabel("labeled training sessions")
    ax.set_ylabel(metric.replace("_", "-").upper())
    title = f"{metric.replace('_', '-').upper()} ({split.replace('_', '-')})"
    if config_hash:
        title += f"  [cfg {config_hash}]"
    ax.set_title(title, fontsize=10)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return fig


def plot_curves(records: list[EvalRecord], out_dir: str,
                config_hash: str = "") -> list[str]:
    """Render the four sample-size charts; returns the SVG paths."""
    os.makedirs(out_dir, exist_ok=True)
    aggs = aggregate(records)
    plt.rcParams["svg.hashsalt"] = "turnsat"
    paths = []
    for metric in METRICS:
        for split in SPLITS:
            fig = render_chart(aggs, metric, split, config_hash)
            path = os.path.join(out_dir, f"{metric}_{split}.svg")
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)
            paths.append(path)
    return paths
