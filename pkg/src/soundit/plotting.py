"""Report figures written next to the CSV/JSON outputs."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}

# no timestamp / version strings in the file, so reruns give identical bytes
PNG_METADATA = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight", metadata=PNG_METADATA)
    plt.close(fig)
    return path


def plot_loss_curve(losses: Sequence[float], path, window: int = 25) -> Path:
    losses = np.asarray(losses, dtype=np.float64)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 2.8))
        steps = np.arange(1, len(losses) + 1)
        ax.plot(steps, losses, lw=0.6, color="0.7", label="step")
        if len(losses) >= window:
            smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
            ax.plot(steps[window - 1:], smooth, lw=1.2, color="C0", label=f"mean of {window}")
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("noise-prediction MSE")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_metric_report(report, path) -> Path:
    """Summary bars plus per-pair distributions of element cosine and perception L1."""
    s = report.summary()
    higher = [k for k in ("ais", "iis", "pss_element", "pss_scene_top1", "pss_scene_top5") if s.get(k) is not None]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(9.5, 2.8))
        ax = axes[0]
        ax.bar(range(len(higher)), [s[k] for k in higher], color="C0")
        ax.set_xticks(range(len(higher)), [k.replace("pss_", "") for k in higher], rotation=30, ha="right")
        ax.set_ylim(0, 1.05)
        title = f"n={s['n_evaluated']}/{s['n']}"
        if s.get("fid") is not None:
            title += f"   FID={s['fid']:.3f}"
        ax.set_title(title)
        elem = [r["element"] for r in report.rows if r["element"] is not None]
        axes[1].hist(elem, bins=np.linspace(0, 1, 21), color="C2")
        axes[1].set_xlabel("element cosine per pair")
        perc = [r["perception"] for r in report.rows]
        axes[2].hist(perc, bins=20, color="C3")
        axes[2].set_xlabel("perception L1 per pair (lower is better)")
        return _save(fig, path)


def plot_ablation(rows: Sequence[dict], path) -> Path:
    ok = [r for r in rows if not r.get("error")]
    names = [r["variant"] for r in ok]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(10, 3))
        for ax, key, label in zip(axes, ("final_loss", "pss_element", "params_total"),
                                  ("final training loss", "PSS element", "parameters")):
            vals = [np.nan if r.get(key) is None else r[key] for r in ok]
            ax.bar(range(len(ok)), vals, color="C1")
            ax.set_xticks(range(len(ok)), names, rotation=40, ha="right")
            ax.set_title(label)
        return _save(fig, path)
