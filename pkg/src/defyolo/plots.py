"""Figures for reports: PR curves, loss curves, ablation bars. Always file output (Agg)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .model.config import CLASS_NAMES  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def pr_curves(report, path, title: str | None = None) -> Path:
    """Precision-recall at IoU 0.5, one line per class, AP in the legend."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name in CLASS_NAMES:
            c = report.curves.get(name)
            if not c:
                continue
            ap = report.per_class[name].ap50
            ax.plot(c["recall"], c["precision"], lw=1.2, label=f"{name} {ap:.3f}")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("Recall")
        ax.set_ylabel("Precision")
        ax.set_title(title or f"PR @ IoU 0.5 (mAP {report.map50:.3f})")
        ax.legend(loc="lower left")
        return _save(fig, path)


def loss_curves(records: list[dict], path, title: str = "Training loss") -> Path:
    """Per-step loss components and total from a JSON-lines loss log."""
    steps = [r["step"] for r in records]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for key in ("box", "cls", "dfl", "focal", "total"):
            if any(r.get(key) for r in records):
                ax.plot(steps, [r[key] for r in records], lw=1.6 if key == "total" else 1.0, label=key)
        ax.set_xlabel("Step")
        ax.set_ylabel("Loss")
        ax.set_yscale("log")
        ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def ablation_bars(rows: list[dict], path) -> Path:
    """Grouped per-class AP@0.5 bars for each ablation row."""
    import numpy as np

    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(7.0, 3.8))
        width = 0.8 / max(len(rows), 1)
        x = np.arange(len(CLASS_NAMES) + 1)
        for i, r in enumerate(rows):
            vals = [r["ap50"].get(n, 0.0) for n in CLASS_NAMES] + [r["map50"]]
            ax.bar(x + (i - (len(rows) - 1) / 2) * width, vals, width, label=r["row"])
        ax.set_xticks(x, list(CLASS_NAMES) + ["all"])
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("AP@0.5")
        ax.legend(ncol=2)
        return _save(fig, path)
