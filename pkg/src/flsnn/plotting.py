"""Matplotlib figures for run and sweep reports. Files only, no interactive use."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 9,
}
MODEL_COLORS = {"snn": "#1f77b4", "ann": "#d62728"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def accuracy_curve(metrics: Sequence[Dict], path, title: str = "") -> Path:
    rows = [r for r in metrics if r.get("test_acc") is not None]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot([r["round"] for r in rows], [r["test_acc"] for r in rows], marker=".")
        ax.set_xlabel("round")
        ax.set_ylabel("test accuracy")
        ax.set_ylim(0, 1)
        if title:
            ax.set_title(title)
        return _save(fig, path)


def retention_heatmaps(layers: Sequence[np.ndarray], path, title: str = "Top-k retention frequency") -> Path:
    """One panel per weight matrix, shared colour scale."""
    vmax = max(float(l.max()) for l in layers) if layers else 1.0
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(layers), figsize=(3.4 * len(layers) + 0.8, 3.4), squeeze=False,
                                 layout="constrained")
        im = None
        for i, (ax, freq) in enumerate(zip(axes[0], layers)):
            im = ax.imshow(freq, aspect="auto", cmap="viridis", vmin=0, vmax=vmax, interpolation="nearest")
            ax.set_title(f"layer {i} ({freq.shape[0]}x{freq.shape[1]})")
            ax.set_xlabel("output unit")
            ax.set_ylabel("input unit")
            ax.grid(False)
        if im is not None:
            fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8)
        fig.suptitle(title)
        fig.savefig(Path(path))
        plt.close(fig)
    return Path(path)


def bandwidth_bars(labels: Sequence[str], uplink_bytes: Sequence[float], path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = np.arange(len(labels))
        ax.bar(x, np.asarray(uplink_bytes, dtype=float) / 2 ** 20, color="#4c72b0")
        ax.set_xticks(x, labels, rotation=30, ha="right")
        ax.set_ylabel("total uplink (MiB)")
        ax.set_yscale("log")
        return _save(fig, path)


def sweep_bars(rows: Sequence[Dict], path) -> Path:
    """Grouped bars of attacked accuracy and accuracy loss per (attack, intensity), one colour per model."""
    groups: Dict[tuple, Dict[str, List[Dict]]] = defaultdict(lambda: defaultdict(list))
    for r in rows:
        if r.get("status", "ok") != "ok":
            continue
        groups[(r["attack"], _num(r["intensity"]), _num(r["kappa"]))][r["model"]].append(r)
    keys = sorted(groups, key=lambda k: (k[0], k[1] if k[1] is not None else -1, k[2] if k[2] is not None else 2))
    models = sorted({m for g in groups.values() for m in g})
    with plt.rc_context(STYLE):
        fig, (ax_acc, ax_loss) = plt.subplots(2, 1, sharex=True, figsize=(max(6.0, 0.8 * len(keys) + 2), 5.0))
        width = 0.8 / max(1, len(models))
        x = np.arange(len(keys))
        for j, model in enumerate(models):
            acc = [np.median([_num(r["attacked_acc"]) for r in groups[k][model]]) if groups[k][model] else np.nan
                   for k in keys]
            loss = [np.median([_num(r["accuracy_loss"]) for r in groups[k][model]]) if groups[k][model] else np.nan
                    for k in keys]
            off = x + (j - (len(models) - 1) / 2) * width
            color = MODEL_COLORS.get(model)
            ax_acc.bar(off, acc, width, label=model.upper(), color=color)
            ax_loss.bar(off, loss, width, color=color)
        ax_acc.set_ylabel("attacked accuracy")
        ax_acc.set_ylim(0, 1)
        ax_acc.legend()
        ax_loss.set_ylabel("clean - attacked")
        ax_loss.axhline(0, color="k", lw=0.6)
        ax_loss.set_xticks(x, [_group_label(k) for k in keys], rotation=30, ha="right")
        return _save(fig, path)


def _num(v):
    if v is None or v == "":
        return None
    return float(v)


def _group_label(key) -> str:
    attack, intensity, kappa = key
    label = attack if intensity is None else f"{attack} {intensity:g}"
    return label + (f"\nk={kappa:g}" if kappa is not None else "\ndense")
