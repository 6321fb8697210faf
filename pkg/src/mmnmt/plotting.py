"""Figures written next to the text reports: learning curves and BLEU-n bars."""

from __future__ import annotations

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

golden_mean = (np.sqrt(5) - 1.0) / 2.0
fig_width = 5.0
params = {
    "axes.labelsize": 10,
    "font.size": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": [fig_width, fig_width * golden_mean],
    "figure.dpi": 100,
    "lines.linewidth": 1.2,
    "lines.markersize": 3,
    "svg.hashsalt": "mmnmt",
}


def _save(fig, path):
    # fixed metadata keeps reruns byte-stable
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)


def plot_training(history, path) -> None:
    """Training loss and validation BLEU against update count.

    ``history`` is a sequence of ``(update, loss, val_bleu)`` rows as kept by
    :class:`mmnmt.trainer.TrainResult`.
    """
    rows = np.asarray(history, dtype=float)
    with matplotlib.rc_context(params):
        fig, ax = plt.subplots()
        ax.plot(rows[:, 0], rows[:, 1], "o-", color="#2b8cbe", label="loss")
        ax.set_xlabel("update")
        ax.set_ylabel("training loss")
        ax2 = ax.twinx()
        ax2.plot(rows[:, 0], rows[:, 2], "s--", color="#e34a33", label="val BLEU")
        ax2.set_ylabel("validation BLEU")
        ax2.set_ylim(0, 100)
        fig.legend(loc="upper center", ncol=2, frameon=False)
        _save(fig, path)


def plot_bleu(report, path) -> None:
    scores = report.bleu
    with matplotlib.rc_context(params):
        fig, ax = plt.subplots()
        ks = list(scores)
        bars = ax.bar([f"BLEU-{k}" for k in ks], [scores[k] for k in ks], color="#7bccc4")
        for bar, k in zip(bars, ks):
            ax.annotate(f"{scores[k]:.2f}", (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                        ha="center", va="bottom", fontsize=8)
        ax.set_ylim(0, 105)
        ax.set_title(f"BP = {report.brevity_penalty:.4f}")
        _save(fig, path)

