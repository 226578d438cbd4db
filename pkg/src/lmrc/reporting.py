"""Report files: TSV tables with matching matplotlib figures."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .corpus import RelationSet  # noqa: E402
from .evaluation import SweepPoint  # noqa: E402


def _style(ax, xlabel: str, ylabel: str) -> None:
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    ax.grid(axis="y", alpha=0.3)


def write_sweep(points: Sequence[SweepPoint], tsv_path: str | Path, png_path: str | Path | None = None) -> None:
    with open(tsv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["theta", "f1", "ign_f1", "precision", "recall", "predicted", "aligned"])
        for pt in points:
            r = pt.report
            w.writerow([f"{pt.theta:.4f}", f"{r.f1:.6f}", f"{r.ign_f1:.6f}", f"{r.precision:.6f}",
                        f"{r.recall:.6f}", r.predicted, pt.aligned])
    if png_path is None:
        return
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot([p.theta for p in points], [100 * p.report.f1 for p in points], marker="o", ms=3)
    _style(ax, "cosine threshold θ", "F1 (%)")
    fig.tight_layout()
    fig.savefig(png_path, dpi=150)
    plt.close(fig)


def write_per_relation(rows: Sequence[tuple[str, float, int]], tsv_path: str | Path,
                       png_path: str | Path | None = None, relation_set: RelationSet | None = None,
                       top: int = 40) -> None:
    with open(tsv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["relation", "name", "f1", "gold"])
        for rel, f1, n in rows:
            name = relation_set.name(rel) if relation_set and rel in relation_set else ""
            w.writerow([rel, name, f"{f1:.6f}", n])
    if png_path is None or not rows:
        return
    shown = rows[:top]
    fig, ax = plt.subplots(figsize=(max(5, 0.22 * len(shown) + 1.5), 3.2))
    ax.bar(range(len(shown)), [100 * f for _, f, _ in shown], width=0.7)
    ax.set_xticks(range(len(shown)))
    ax.set_xticklabels([r for r, _, _ in shown], rotation=90, fontsize=7)
    _style(ax, "relation (descending gold count)", "F1 (%)")
    fig.tight_layout()
    fig.savefig(png_path, dpi=150)
    plt.close(fig)
