"""Figures written alongside the reports (Agg backend, PNG without timestamps)."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0
STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _figure(width: float = 5.0, height: float | None = None):
    return plt.figure(figsize=(width, height or width * GOLDEN))


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loglik_trace(trace, path) -> Path:
    """Marginal log-likelihood per EM iteration, plus its increments on a log scale."""
    trace = np.asarray(trace, dtype=float)
    with plt.rc_context(STYLE):
        fig = _figure(7.0, 2.8)
        ax1, ax2 = fig.subplots(1, 2)
        ax1.plot(np.arange(len(trace)), trace, color="k", lw=1)
        ax1.set_xlabel("iteration")
        ax1.set_ylabel("log-likelihood")
        inc = np.diff(trace)
        if inc.size:
            ax2.semilogy(np.arange(1, len(trace)), np.maximum(np.abs(inc), 1e-16), color="k", lw=1)
        ax2.set_xlabel("iteration")
        ax2.set_ylabel("|change|")
        return _save(fig, path)


def plot_gf_margins(margins, path) -> Path:
    """Observed and expected count frequencies, one panel per item and occasion."""
    k = max(1, len(margins))
    with plt.rc_context(STYLE):
        fig = _figure(3.0 * k, 2.6)
        axes = np.atleast_1d(fig.subplots(1, k))
        for ax, m in zip(axes, margins):
            c = np.arange(len(m.observed))
            ax.bar(c, m.observed, color="0.75", label="observed")
            ax.plot(c, m.expected, "k.-", lw=1, label="expected")
            ax.set_title(f"{m.item} t{m.occasion}  GF {m.total:.2f}")
            ax.set_xlabel("count")
        axes[0].set_ylabel("frequency")
        axes[0].legend(frameon=False)
        return _save(fig, path)


def plot_correlation_discrepancies(discrepancies: dict, path) -> Path:
    k = max(1, len(discrepancies))
    with plt.rc_context(STYLE):
        fig = _figure(3.2 * k, 3.0)
        axes = np.atleast_1d(fig.subplots(1, k))
        for ax, (item, D) in zip(axes, discrepancies.items()):
            lim = max(0.05, float(np.max(np.abs(D))))
            im = ax.imshow(D, cmap="RdBu_r", vmin=-lim, vmax=lim)
            T = D.shape[0]
            ax.set_xticks(range(T), [f"t{t + 1}" for t in range(T)])
            ax.set_yticks(range(T), [f"t{t + 1}" for t in range(T)])
            for s in range(T):
                for t in range(T):
                    ax.text(t, s, f"{D[s, t]:.3f}", ha="center", va="center", fontsize=7)
            ax.set_title(item)
            fig.colorbar(im, ax=ax, shrink=0.8)
        return _save(fig, path)


def plot_standardized_loadings(loadings: dict, path) -> Path:
    """Standardized loadings against occasion, one line per item and factor."""
    series: dict[str, list[tuple[int, float]]] = {}
    for (item, t), value in loadings.items():
        vals = np.atleast_1d(value)
        for k, v in enumerate(vals):
            label = item if vals.size == 1 else f"{item} z{k + 1}"
            series.setdefault(label, []).append((t, float(v)))
    with plt.rc_context(STYLE):
        fig = _figure()
        ax = fig.subplots()
        for label, pts in series.items():
            t, v = zip(*pts)
            ax.plot(t, v, "o-", lw=1, label=label)
        ax.set_xlabel("occasion")
        ax.set_ylabel("standardized loading")
        ax.set_ylim(-1, 1)
        ax.axhline(0, color="0.6", lw=0.5)
        ax.legend(frameon=False)
        return _save(fig, path)
