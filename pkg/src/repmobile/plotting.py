"""Report figures rendered to PNG files (Agg backend, no display needed)."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _pct(v) -> float:
    return float(v) * 100.0


def plot_results_grid(rows: Sequence[dict], columns: Sequence[str], path) -> Path:
    """Accuracy per method against training-subset size."""
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    xs = list(range(len(columns)))
    for r in rows:
        pts = [(x, _pct(r[c])) for x, c in zip(xs, columns) if c in r and r[c] != ""]
        if pts:
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=r["method"])
    ax.axhline(10.0, color="grey", lw=0.8, ls=":", label="chance")
    ax.set_xticks(xs, columns)
    ax.set_xlabel("training subset")
    ax.set_ylabel("test accuracy (%)")
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def plot_training_curves(curves: dict[str, list[dict]], path) -> Path:
    """Loss and learning rate per epoch for each named run."""
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.6))
    for name, rows in curves.items():
        ep = [float(r["epoch"]) + 1 for r in rows]
        a1.plot(ep, [float(r["loss"]) for r in rows], marker=".", label=name)
        a2.plot(ep, [float(r["lr"]) for r in rows], marker=".", label=name)
    a1.set_xlabel("epoch")
    a1.set_ylabel("training loss")
    a2.set_xlabel("epoch")
    a2.set_ylabel("learning rate (end of epoch)")
    for a in (a1, a2):
        a.grid(alpha=0.3)
    a1.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_prune_rounds(rounds: Sequence[dict], path) -> Path:
    """Parameters and accuracy across pruning rounds."""
    fig, ax = plt.subplots(figsize=(5.6, 3.8))
    widths = [str(r["width"]) for r in rounds]
    ax.bar(widths, [int(r["params"]) / 1e3 for r in rounds], color="#9ab", label="params (K)")
    ax.set_xlabel("base width")
    ax.set_ylabel("parameters (K)")
    acc = [r.get("acc") for r in rounds]
    if all(a not in ("", None) for a in acc):
        ax2 = ax.twinx()
        ax2.plot(widths, [_pct(a) for a in acc], color="C3", marker="o", label="after fine-tune")
        pruned = [r.get("acc_pruned") for r in rounds]
        if all(a not in ("", None) for a in pruned):
            ax2.plot(widths, [_pct(a) for a in pruned], color="C1", marker="x", ls="--", label="before fine-tune")
        ax2.set_ylabel("test accuracy (%)")
        ax2.set_ylim(0, 100)
        ax2.legend(fontsize=7, loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def pipeline_figures(out_dir, rows: Sequence[dict], columns: Sequence[str], summaries: dict) -> list[Path]:
    out_dir = Path(out_dir)
    fig_dir = out_dir / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    paths = [plot_results_grid(rows, columns, fig_dir / "results_grid.png")]
    for label, summary in summaries.items():
        sdir = out_dir / f"subset_{label.rstrip('%')}"
        curves = {}
        for p in sorted(sdir.glob("teachers/*/metrics.csv")):
            curves[f"teacher {p.parent.name}"] = read_metrics(p)
        for name in ("student", "baseline"):
            if (sdir / name / "metrics.csv").exists():
                curves[name] = read_metrics(sdir / name / "metrics.csv")
        tag = label.rstrip("%")
        if curves:
            paths.append(plot_training_curves(curves, fig_dir / f"training_curves_{tag}.png"))
        if summary.get("prune_rounds"):
            paths.append(plot_prune_rounds(summary["prune_rounds"], fig_dir / f"prune_rounds_{tag}.png"))
    return paths
