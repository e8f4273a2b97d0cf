"""Matplotlib figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
}

STRATEGY_COLORS = {"naive": "#9a9a9a", "replacement": "#e08a3c", "context_aware": "#2f6db3"}
STRATEGY_LABELS = {"naive": "naive", "replacement": "replacement", "context_aware": "context-aware"}


def figure_size(scale: float = 1.0, ratio: float = 0.62) -> tuple[float, float]:
    width = 5.0 * scale
    return width, width * ratio


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # no software/date tags so reruns produce identical files
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curves(curves: Mapping[str, Sequence[float]], path, window: int = 25) -> Path:
    """Per-step training loss with a running mean, one panel per stage."""
    with plt.rc_context(STYLE):
        n = max(len(curves), 1)
        fig, axes = plt.subplots(1, n, figsize=figure_size(0.8 * n + 0.2), squeeze=False)
        for ax, (stage, losses) in zip(axes[0], curves.items()):
            y = np.asarray(losses, dtype=float)
            x = np.arange(1, len(y) + 1)
            ax.plot(x, y, color="0.75", lw=0.6)
            if len(y) >= window:
                smooth = np.convolve(y, np.ones(window) / window, mode="valid")
                ax.plot(x[window - 1:], smooth, color="#2f6db3", lw=1.2)
            ax.set_yscale("log")
            ax.set_xlabel("step")
            ax.set_ylabel("weighted denoising loss")
            ax.set_title(stage)
        return _save(fig, path)


def plot_strategy_bars(rows: Sequence[Mapping], path) -> Path:
    """MFC per inference strategy, with the reference values on a twin axis."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figure_size(0.8))
        names = [r["strategy"] for r in rows]
        x = np.arange(len(rows))
        ax.bar(x - 0.18, [r["mfc"] for r in rows], 0.36,
               color=[STRATEGY_COLORS.get(n, "C0") for n in names], label="toy model")
        ax.set_xticks(x, [STRATEGY_LABELS.get(n, n) for n in names])
        ax.set_ylabel("MFC (toy)")
        if all("reference_mfc" in r for r in rows):
            ref = ax.twinx()
            ref.bar(x + 0.18, [r["reference_mfc"] for r in rows], 0.36, color="none",
                    edgecolor="k", hatch="//", label="reference")
            ref.set_ylabel("MFC (reference)")
            ref.spines["top"].set_visible(False)
        return _save(fig, path)


def plot_sigma_sweep(rows: Sequence[Mapping], path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figure_size(0.8))
        x = [r["log_sigma_eps"] for r in rows]
        ax.plot(x, [r["mfc"] for r in rows], "o-", color="#2f6db3", label="MFC")
        best = int(np.argmin([r["mfc"] for r in rows]))
        ax.plot([x[best]], [rows[best]["mfc"]], "o", ms=10, mfc="none", mec="k")
        ax.set_xlabel(r"$\log\,\sigma_\epsilon$")
        ax.set_ylabel("MFC")
        acc = ax.twinx()
        acc.plot(x, [r["abs_rel"] for r in rows], "s--", color="#e08a3c", label="AbsRel")
        acc.set_ylabel("AbsRel")
        acc.spines["top"].set_visible(False)
        return _save(fig, path)


def plot_oracle_check(rows: Sequence[Mapping], path) -> Path:
    """Conditional-mean error per strategy with bootstrap intervals."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figure_size(0.8))
        names = [r["strategy"] for r in rows]
        eps = np.array([r["epsilon"] for r in rows])
        err = np.array([[e - r["ci_low"] for e, r in zip(eps, rows)], [r["ci_high"] - e for e, r in zip(eps, rows)]])
        x = np.arange(len(rows))
        ax.bar(x, eps, color=[STRATEGY_COLORS.get(n, "C0") for n in names])
        ax.errorbar(x, eps, yerr=np.maximum(err, 0.0), fmt="none", ecolor="k", capsize=3)
        ax.set_xticks(x, [STRATEGY_LABELS.get(n, n) for n in names])
        ax.set_yscale("log")
        ax.set_ylabel("mean |conditional mean error|")
        return _save(fig, path)


def plot_pair_mfc(pair_rows: Sequence[Mapping], path) -> Path:
    """Consistency error for each consecutive frame pair."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figure_size(0.8))
        x = [r["frame_m"] for r in pair_rows]
        ax.plot(x, [r["mfc"] for r in pair_rows], ".-", color="#2f6db3", label="pose")
        flow = [v if isinstance(v, float) else np.nan for v in (r.get("mfc_flow") for r in pair_rows)]
        if np.isfinite(flow).any():
            ax.plot(x, flow, ".--", color="#e08a3c", label="flow")
            ax.legend(frameon=False)
        ax.set_xlabel("frame")
        ax.set_ylabel("MFC")
        return _save(fig, path)
