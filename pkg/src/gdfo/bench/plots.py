"""Figures for experiment output. Everything renders off-screen to files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 150,
}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def preset_bars(summary: list[dict], path) -> None:
    """Mean test accuracy per preset with std error bars."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.2))
        names = [r["preset"] for r in summary]
        means = np.array([r["mean_accuracy"] for r in summary])
        stds = np.array([r["std_accuracy"] for r in summary])
        ax.bar(names, means, yerr=stds, capsize=3, color="0.55", edgecolor="0.2")
        for i, m in enumerate(means):
            ax.text(i, m + stds[i] + 0.005, f"{m:.3f}", ha="center", va="bottom", fontsize=7)
        lo = max(0.0, float((means - stds).min()) - 0.05)
        ax.set_ylim(lo, 1.0)
        ax.set_ylabel("test accuracy")
        ax.tick_params(axis="x", labelrotation=20)
        _save(fig, path)


def alpha_curve(summary: list[dict], path) -> None:
    """Accuracy against the balancing weight alpha."""
    rows = sorted(summary, key=lambda r: r["alpha"])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        x = np.array([r["alpha"] for r in rows])
        m = np.array([r["mean_accuracy"] for r in rows])
        s = np.array([r["std_accuracy"] for r in rows])
        ax.plot(x, m, marker="o", color="k")
        ax.fill_between(x, m - s, m + s, color="0.8")
        best = int(np.argmax(m))
        ax.plot([x[best]], [m[best]], marker="*", markersize=12, color="tab:red")
        ax.set_xlabel(r"$\alpha$")
        ax.set_ylabel("test accuracy")
        ax.set_xticks(x)
        _save(fig, path)


def training_curves(results, path) -> None:
    """Best teacher CE per step, one line per (preset, alpha), seed-averaged."""
    curves: dict = {}
    for r in results:
        ce = [h["best_teacher_ce"] for h in r.history]
        if ce and np.isfinite(ce).all():
            curves.setdefault((r.preset, r.alpha), []).append(ce)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for (preset, alpha), runs in curves.items():
            n = min(len(c) for c in runs)
            ax.plot(np.arange(1, n + 1), np.mean([c[:n] for c in runs], axis=0), label=f"{preset} a={alpha:g}")
        ax.set_xlabel("generation")
        ax.set_ylabel("best teacher CE (train)")
        if curves:
            ax.legend(fontsize=6)
        _save(fig, path)
