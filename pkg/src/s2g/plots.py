"""Report rendering: delimited metric tables and matplotlib figures written to files."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .optree import OpTree, kind_token  # noqa: E402

METRIC_FIELDS = ("epoch", "split", "loss", "exact_match", "answer_acc", "lr")


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_metrics_csv(records: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, extrasaction="ignore")
        w.writeheader()
        for rec in records:
            w.writerow({k: "" if rec.get(k) is None else rec.get(k) for k in METRIC_FIELDS})


def plot_training_curves(records: Sequence[dict], path) -> None:
    """Loss per split on the left, accuracies on the right."""
    fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(9, 3.4))
    for split in sorted({r["split"] for r in records}):
        rows = [r for r in records if r["split"] == split]
        ax_l.plot([r["epoch"] for r in rows], [r["loss"] for r in rows], label=split)
        for key, style in (("answer_acc", "-"), ("exact_match", "--")):
            pts = [(r["epoch"], r[key]) for r in rows if r.get(key) is not None]
            if pts:
                xs, ys = zip(*pts)
                ax_a.plot(xs, ys, style, marker="o", ms=3, label=f"{split} {key}")
    ax_l.set_yscale("log")
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("mean NLL per problem")
    ax_a.set_xlabel("epoch")
    ax_a.set_ylabel("accuracy")
    ax_a.set_ylim(-0.02, 1.02)
    for ax in (ax_l, ax_a):
        ax.grid(alpha=0.3)
        if ax.get_legend_handles_labels()[0]:
            ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_class_csv(per_class: dict, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "n", "answer_acc", "exact_match"])
        for cls, row in per_class.items():
            w.writerow([cls, row["n"], row["answer_acc"], row["exact_match"]])


def plot_class_accuracy(per_class: dict, path) -> None:
    names = list(per_class)
    fig, ax = plt.subplots(figsize=(5, 3))
    xs = range(len(names))
    ax.bar([x - 0.2 for x in xs], [per_class[n]["answer_acc"] for n in names], 0.4, label="answer")
    ax.bar([x + 0.2 for x in xs], [per_class[n]["exact_match"] for n in names], 0.4, label="exact tree")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(names, fontsize=8)
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _layout(tree: OpTree) -> dict[int, tuple[float, int]]:
    """x from in-order leaf count, y from depth."""
    pos: dict[int, tuple[float, int]] = {}
    counter = [0]

    def walk(i: int, depth: int) -> float:
        kids = tree.nodes[i].children
        if not kids:
            x = float(counter[0])
            counter[0] += 1
        else:
            xs = [walk(c, depth + 1) for c in kids]
            x = sum(xs) / len(xs)
        pos[i] = (x, depth)
        return x

    walk(tree.root, 0)
    return pos


def plot_trees(trees: Sequence[OpTree], titles: Sequence[str], path) -> None:
    """Draw trees side by side (e.g. an operation tree next to its binary expansion)."""
    fig, axes = plt.subplots(1, len(trees), figsize=(4 * len(trees), 3.5), squeeze=False)
    for ax, tree, title in zip(axes[0], trees, titles):
        pos = _layout(tree)
        for i, node in enumerate(tree.nodes):
            for c in node.children:
                ax.plot([pos[i][0], pos[c][0]], [-pos[i][1], -pos[c][1]], color="0.5", lw=1, zorder=1)
        for i, node in enumerate(tree.nodes):
            x, y = pos[i]
            ax.text(x, -y, kind_token(node.kind), ha="center", va="center", fontsize=8, zorder=2,
                    bbox=dict(boxstyle="round,pad=0.3", fc="white", ec="0.3"))
        ax.set_title(title, fontsize=9)
        ax.margins(0.2)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_report(metrics_path, out_dir) -> list[Path]:
    """metrics JSON lines -> metrics.csv and curves.png under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = read_metrics(metrics_path)
    csv_path, png_path = out / "metrics.csv", out / "curves.png"
    write_metrics_csv(records, csv_path)
    plot_training_curves(records, png_path)
    return [csv_path, png_path]
