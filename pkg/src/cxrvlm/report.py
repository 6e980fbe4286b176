"""Plain-text tables and matplotlib figures for stats, metrics, and training.

Figures are rendered headlessly to files next to the delimited output;
they are a convenience view over the same numbers, never the source of
truth.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .data import SECTIONS, SPLITS, StatsCell
from .metrics import MetricReport

METRIC_COLUMNS = ("bleu4", "rougel", "embed_f1", "label_f1", "entity_f1")


def _fmt(value, width: int = 10) -> str:
    if value is None:
        return "absent".rjust(width)
    return f"{value:.2f}".rjust(width)


def stats_table(grid: dict[str, dict[str, StatsCell]]) -> str:
    """split x section grid: counts, word-count and image-count stats."""
    head = (f"{'split':<12}{'section':<13}{'count':>8}{'word_mean':>11}"
            f"{'word_std':>11}{'img_mean':>10}{'img_std':>10}")
    lines = [head, "-" * len(head)]
    for split in SPLITS:
        for section in SECTIONS:
            c = grid[split][section]
            lines.append(
                f"{split:<12}{section:<13}{c.count:>8}"
                f"{_fmt(c.word_mean, 11)}{_fmt(c.word_std, 11)}"
                f"{_fmt(c.img_mean, 10)}{_fmt(c.img_std, 10)}")
    return "\n".join(lines)


def stats_figure(grid: dict[str, dict[str, StatsCell]], path) -> None:
    """Bar charts of counts and mean word counts (with std bars)."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    x = range(len(SPLITS))
    width = 0.38
    for k, section in enumerate(SECTIONS):
        counts = [grid[s][section].count for s in SPLITS]
        axes[0].bar([i + (k - 0.5) * width for i in x], counts, width, label=section)
        means = [grid[s][section].word_mean or 0.0 for s in SPLITS]
        errs = [grid[s][section].word_std or 0.0 for s in SPLITS]
        axes[1].bar([i + (k - 0.5) * width for i in x], means, width,
                    yerr=errs, capsize=3, label=section)
    for ax, title in zip(axes, ("sample count", "mean word count")):
        ax.set_xticks(list(x))
        ax.set_xticklabels(SPLITS, rotation=20, ha="right")
        ax.set_title(title)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def metric_table(rows: list[tuple[str, str, str, MetricReport]]) -> str:
    """One line per (model, split, section) with the five metric columns."""
    head = (f"{'model':<16}{'split':<13}{'section':<13}"
            + "".join(f"{c:>11}" for c in METRIC_COLUMNS))
    lines = [head, "-" * len(head)]
    for model_name, split, section, rep in rows:
        vals = rep.as_dict()
        lines.append(f"{model_name:<16}{split:<13}{section:<13}"
                     + "".join(_fmt(vals[c], 11) for c in METRIC_COLUMNS))
    return "\n".join(lines)


def metrics_figure(rows: list[tuple[str, str, str, MetricReport]], path) -> None:
    fig, ax = plt.subplots(figsize=(8, 4))
    width = 0.8 / max(1, len(rows))
    for i, (model_name, split, section, rep) in enumerate(rows):
        vals = rep.as_dict()
        ys = [vals[c] if vals[c] is not None else 0.0 for c in METRIC_COLUMNS]
        xs = [j + i * width for j in range(len(METRIC_COLUMNS))]
        ax.bar(xs, ys, width, label=f"{model_name} {split}/{section}")
    ax.set_xticks([j + 0.4 - width / 2 for j in range(len(METRIC_COLUMNS))])
    ax.set_xticklabels(METRIC_COLUMNS)
    ax.set_ylim(0, 105)
    ax.set_ylabel("score")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def training_curves_figure(records: list[dict], path) -> None:
    """Loss and learning-rate curves from the JSONL training log records."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for stage in (1, 2):
        steps = [r["step"] for r in records if r.get("stage") == stage and "train_loss" in r]
        losses = [r["train_loss"] for r in records if r.get("stage") == stage and "train_loss" in r]
        if steps:
            axes[0].plot(steps, losses, label=f"stage {stage} train")
        esteps = [r["step"] for r in records if r.get("stage") == stage and "eval_loss" in r]
        elosses = [r["eval_loss"] for r in records if r.get("stage") == stage and "eval_loss" in r]
        if esteps:
            axes[0].plot(esteps, elosses, "o--", label=f"stage {stage} eval")
        lsteps = [r["step"] for r in records if r.get("stage") == stage and "lr" in r]
        lrs = [r["lr"] for r in records if r.get("stage") == stage and "lr" in r]
        if lsteps:
            axes[1].plot(lsteps, lrs, label=f"stage {stage}")
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("masked loss")
    axes[0].legend()
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("learning rate")
    axes[1].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
