"""Figure rendering for evaluation reports.

Written alongside the JSON/CSV report files: answer reports get a metric bar
chart and a disposition breakdown; verifier reports get class ratio and
per-class accuracy bars, plus a precision/recall/F1 line plot over the
rectify-step budgets when a sweep is present.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

VERDICT_CLASSES = ("A", "B", "C")


def _style(ax, title: str, ylabel: str) -> None:
    ax.set_title(title, fontsize=11)
    ax.set_ylabel(ylabel, fontsize=10)
    ax.grid(axis="y", alpha=0.3, linewidth=0.5)
    ax.set_axisbelow(True)
    for spine in ("top", "right"):
        ax.spines[spine].set_visible(False)


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def render_answer_figures(report: dict, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    names = ["f1", "em", "acc"]
    values = [report[n] if report[n] is not None else 0.0 for n in names]
    ax.bar(names, values, color=["#4878a8", "#6aa84f", "#c27ba0"])
    ax.set_ylim(0, 1)
    _style(ax, "answer quality", "rate")
    written.append(_save(fig, out_dir / "answer_metrics.png"))

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    names = ["answered", "withheld", "failed"]
    counts = [report["n_answered"], report["n_withheld"], report["n_failed"]]
    ax.bar(names, counts, color=["#4878a8", "#e69138", "#cc4125"])
    _style(ax, "dispositions", "questions")
    written.append(_save(fig, out_dir / "dispositions.png"))
    return written


def render_verifier_figures(report: dict, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    groups = report["groups"]

    for group in groups:
        if group["class_ratios"] is None:
            continue
        budget = group["max_rectify_steps"]
        fig, axes = plt.subplots(1, 2, figsize=(7.5, 3.2))
        ratios = [group["class_ratios"][c] for c in VERDICT_CLASSES]
        axes[0].bar(VERDICT_CLASSES, ratios, color="#4878a8")
        axes[0].set_ylim(0, 1)
        _style(axes[0], f"gold class ratios (budget {budget})", "ratio")
        accs = [
            group["per_class_accuracy"][c]
            if group["per_class_accuracy"][c] is not None
            else 0.0
            for c in VERDICT_CLASSES
        ]
        axes[1].bar(VERDICT_CLASSES, accs, color="#6aa84f")
        axes[1].set_ylim(0, 1)
        _style(axes[1], f"verification accuracy (budget {budget})", "accuracy")
        written.append(_save(fig, out_dir / f"verifier_classes_budget{budget}.png"))

    if len(groups) >= 2:
        fig, ax = plt.subplots(figsize=(4.8, 3.4))
        budgets = [g["max_rectify_steps"] for g in groups]
        plotted = False
        for key, marker in (("precision", "o"), ("recall", "s"), ("f1", "^")):
            series = [g[key] for g in groups]
            if any(v is None for v in series):
                continue
            ax.plot(budgets, series, marker=marker, label=key)
            plotted = True
        ax.set_xticks(budgets)
        ax.set_xlabel("max rectify steps", fontsize=10)
        ax.set_ylim(0, 1.05)
        if plotted:
            ax.legend(frameon=False, fontsize=9)
        _style(ax, "delivery quality vs rectify budget", "rate")
        written.append(_save(fig, out_dir / "rectify_sweep.png"))
    return written
