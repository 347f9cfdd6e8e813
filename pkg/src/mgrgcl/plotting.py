"""Figures written next to the JSON reports."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}

# fixed metadata keeps repeated runs byte-stable
_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return path


def plot_source_loss(history, path):
    """Supervised loss per epoch, with the per-batch spread."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        if history:
            epochs = [h["epoch"] for h in history]
            ax.plot(epochs, [h["loss"] for h in history], color="C0", label="epoch mean")
            lo = [min(h["batch_losses"]) for h in history]
            hi = [max(h["batch_losses"]) for h in history]
            ax.fill_between(epochs, lo, hi, color="C0", alpha=0.2, lw=0)
            ax.legend(frameon=False)
        ax.set_xlabel("epoch")
        ax.set_ylabel("triplet + identity loss")
        ax.set_title("source training")
        return _save(fig, path)


def plot_rounds(reports, path):
    """Group count, noise count and mean contrastive loss per adaptation round."""
    with plt.rc_context(_STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7.5, 3))
        rounds = [r.round for r in reports]
        ax1.plot(rounds, [r.num_groups for r in reports], "o-", label="groups")
        ax1.plot(rounds, [r.noise for r in reports], "s--", label="noise samples")
        ax1.set_xlabel("round")
        ax1.legend(frameon=False)
        ax2.plot(rounds, [np.nan if r.mean_loss is None else r.mean_loss for r in reports], "o-", color="C3")
        ax2.set_xlabel("round")
        ax2.set_ylabel("mean group contrastive loss")
        return _save(fig, path)


def plot_ablation(rows, path):
    """Grouped bars of mAP and rank-1 per variant; ``rows`` as in the ablation table."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3))
        x = np.arange(len(rows))
        ax.bar(x - 0.2, [100 * r["mAP"] for r in rows], 0.4, label="mAP")
        ax.bar(x + 0.2, [100 * r["rank1"] for r in rows], 0.4, label="rank-1")
        ax.set_xticks(x, [r["variant"] for r in rows])
        ax.set_ylabel("%")
        ax.set_ylim(0, 100)
        ax.legend(frameon=False, loc="lower right")
        return _save(fig, path)
