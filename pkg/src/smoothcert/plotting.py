"""Report figures (PNG, Agg backend) written next to the JSON/CSV outputs."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (4.8, 3.4),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def certified_curves(path, radii, curves: dict, title: str = "") -> None:
    """Certified accuracy against l2 radius, one step curve per label."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, acc in curves.items():
            ax.step(radii, acc, where="post", label=label)
        ax.set_xlabel("l2 radius")
        ax.set_ylabel("certified accuracy")
        ax.set_ylim(0, 1.02)
        if title:
            ax.set_title(title)
        if len(curves) > 1:
            ax.legend()
        _save(fig, path)


def accuracy_lines(path, xs, series: dict, xlabel: str, ylabel: str = "top-1 accuracy") -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, ys in series.items():
            ax.plot(xs, ys, marker="o", ms=3, label=label)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if len(series) > 1:
            ax.legend()
        _save(fig, path)


def training_curves(path, records) -> None:
    ep = [r["epoch"] for r in records]
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.2))
        a1.plot(ep, [r["loss"] for r in records])
        a1.set_xlabel("epoch")
        a1.set_ylabel("train loss")
        for key in ("train_acc", "clean_val_acc", "robust_val_acc"):
            a2.plot(ep, [r[key] for r in records], label=key.replace("_", " "))
        a2.set_xlabel("epoch")
        a2.set_ylabel("accuracy")
        a2.legend()
        _save(fig, path)


def corruption_heatmap(path, errors: dict, title: str = "") -> None:
    kinds = sorted(errors)
    grid = np.array([errors[k] for k in kinds])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.8, 0.3 * len(kinds) + 1.2))
        im = ax.imshow(grid, vmin=0, vmax=1, cmap="viridis", aspect="auto")
        ax.set_yticks(range(len(kinds)), kinds)
        ax.set_xticks(range(grid.shape[1]), [str(s + 1) for s in range(grid.shape[1])])
        ax.set_xlabel("severity")
        ax.grid(False)
        fig.colorbar(im, ax=ax, label="top-1 error")
        if title:
            ax.set_title(title)
        _save(fig, path)


def image_grid(path, images, gradients, labels=None) -> None:
    """Clean images (top row) above display-normalised gradient maps (bottom row)."""
    n = len(images)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, n, figsize=(1.2 * n + 0.4, 2.8), squeeze=False)
        for i in range(n):
            axes[0, i].imshow(np.transpose(images[i], (1, 2, 0)), interpolation="nearest")
            axes[1, i].imshow(gradients[i].mean(axis=0), cmap="gray", vmin=0, vmax=1, interpolation="nearest")
            if labels is not None:
                axes[0, i].set_title(str(labels[i]))
            for ax in axes[:, i]:
                ax.axis("off")
        _save(fig, path)
