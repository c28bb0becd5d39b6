"""Report figures written next to the CSV/JSON outputs."""
from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
from matplotlib import pyplot as plt  # noqa: E402

from . import CLASSES  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 120,
    "font.size": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def _save(fig, path):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp = os.path.join(directory, ".tmp-" + os.path.basename(path))
    fig.savefig(tmp, format=os.path.splitext(path)[1][1:] or "png", bbox_inches="tight")
    os.replace(tmp, path)
    plt.close(fig)


def plot_schedule(steps, multipliers, path, warmup=None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(steps, multipliers, color="C0", lw=1.8)
        if warmup is not None:
            ax.axvline(warmup, color="0.5", ls="--", lw=1)
        ax.set_xlabel("optimizer step")
        ax.set_ylabel("LR multiplier")
        ax.set_ylim(0, 1.05)
        ax.set_title("Warm-up then linear decay")
        _save(fig, path)


def plot_kfold(report, path):
    """Per-fold macro-F1 bars plus the per-class mean F1."""
    folds = report.folds or [report]
    with plt.rc_context({**STYLE, "figure.figsize": (8.0, 3.6)}):
        fig, (ax1, ax2) = plt.subplots(1, 2, gridspec_kw={"width_ratios": [2, 1]})
        xs = [f.fold if f.fold is not None else i for i, f in enumerate(folds)]
        ax1.bar(range(len(xs)), [f.macro_f1 for f in folds], color="C0")
        ax1.set_xticks(range(len(xs)), [str(x) for x in xs])
        ax1.axhline(report.macro_f1, color="C3", ls="--", lw=1, label=f"mean {report.macro_f1:.4f}")
        ax1.set_xlabel("fold")
        ax1.set_ylabel("macro-F1")
        ax1.set_ylim(0, 1)
        ax1.legend(loc="lower right", frameon=False)
        ax2.bar(range(len(CLASSES)), [report.per_class[c]["f1"] for c in CLASSES], color=["C2", "C1", "C3"])
        ax2.set_xticks(range(len(CLASSES)), list(CLASSES))
        ax2.set_ylim(0, 1)
        ax2.set_ylabel("F1")
        fig.tight_layout()
        _save(fig, path)


def plot_history(history, path):
    epochs = [h["epoch"] for h in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(epochs, [h["train_loss"] for h in history], "o-", label="train loss", color="C0")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        if any("valid_macro_f1" in h for h in history):
            ax2 = ax.twinx()
            ax2.plot(epochs, [h.get("valid_macro_f1", float("nan")) for h in history], "s-", color="C3",
                     label="valid macro-F1")
            ax2.set_ylabel("macro-F1")
            ax2.set_ylim(0, 1)
            ax2.grid(False)
        ax.set_title("Classifier fine-tuning")
        _save(fig, path)


def plot_ablation(rows, path):
    """``rows``: list of (name, mean, values)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        names = [r[0] for r in rows]
        ax.bar(range(len(names)), [r[1] for r in rows], color="C0", alpha=0.7)
        ax.set_xticks(range(len(names)), names)
        for i, r in enumerate(rows):
            ax.plot([i] * len(r[2]), r[2], "k.", ms=4)
        ax.set_ylabel("validation macro-F1")
        ax.set_ylim(0, 1)
        _save(fig, path)
