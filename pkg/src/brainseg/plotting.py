"""Report figures: loss curves, per-tissue metric boxplots, selection bars.

Everything renders through the Agg backend straight to files; PNG metadata is
pinned so reruns with the same inputs produce the same bytes.
"""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import TISSUES  # noqa: E402

_PNG_META = {"Software": None}
_COLORS = {"csf": "#4c72b0", "gm": "#dd8452", "wm": "#55a868"}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_history(history, path):
    """Dice loss per epoch, with the validation score on a twin axis when present."""
    fig, ax = plt.subplots(figsize=(6, 3.6))
    epochs = [e.epoch for e in history.epochs]
    ax.plot(epochs, history.losses, color="k", lw=1.2, label="dice loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("dice loss")
    ax.set_ylim(bottom=0)

    val = [(e.epoch, e.val_mean_dsc) for e in history.epochs if e.val_mean_dsc is not None]
    if val:
        ax2 = ax.twinx()
        ax2.plot(*zip(*val), color="#c44e52", lw=1, label="val mean DSC")
        ax2.set_ylabel("validation mean tissue DSC")
        ax2.set_ylim(0, 1)
        if history.best_epoch:
            ax2.axvline(history.best_epoch, color="#c44e52", ls=":", lw=0.8)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_metrics(records, path):
    """One panel per metric (DSC, HD, AVD), one box per tissue across volumes."""
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    for ax, (attr, title) in zip(axes, (("dsc", "DSC"), ("hd", "Hausdorff"), ("avd", "AVD"))):
        data, names = [], []
        for t in TISSUES.values():
            vals = [getattr(r, attr)[t] for r in records if getattr(r, attr)[t] is not None]
            data.append(vals if vals else [np.nan])
            names.append(t.upper())
        box = ax.boxplot(data, patch_artist=True, widths=0.6)
        ax.set_xticks(range(1, len(names) + 1), names)
        for patch, t in zip(box["boxes"], TISSUES.values()):
            patch.set_facecolor(_COLORS[t])
        ax.set_title(title)
        ax.grid(axis="y", alpha=0.3)
    return _save(fig, path)


def plot_selection(report, path):
    """Grouped per-tissue DSC bars for each ranked row; suggested rows are hatched."""
    rows = report.rows
    fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(rows) + 2), 3.6))
    x = np.arange(len(rows))
    width = 0.25
    for j, t in enumerate(TISSUES.values()):
        bars = ax.bar(x + (j - 1) * width, [r.dsc[t] for r in rows], width,
                      color=_COLORS[t], label=t.upper())
        for bar, r in zip(bars, rows):
            if r.suggested:
                bar.set_hatch("//")
    ax.plot(x, [r.mean_dsc for r in rows], "k_", ms=18, mew=2, label="mean")
    ax.set_xticks(x, [r.id for r in rows], rotation=30, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("DSC")
    ax.set_title(f"{report.procedure} ranking")
    ax.legend(fontsize=8, ncol=4, loc="lower right")
    return _save(fig, path)
