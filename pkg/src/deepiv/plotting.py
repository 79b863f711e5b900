"""Report figures rendered to PNG files.

The Agg backend is forced so that rendering never needs a display, and PNG
metadata is stripped so repeated runs produce identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .simulation import ResultsTable  # noqa: E402

_PNG_META = {"Software": None}
_STYLE = {"deepiv": ("tab:blue", "o"), "2sls": ("tab:orange", "s"), "ffnet": ("tab:green", "^")}


def plot_mse_curves(table: ResultsTable, path: str | Path) -> Path:
    """Median structural MSE against sample size, one panel per rho, log-log axes."""
    ok = [r for r in table.rows if r.status == "ok"]
    rhos = sorted({r.rho for r in ok})
    methods = [m for m in _STYLE if any(r.method == m for r in ok)]
    fig, axes = plt.subplots(1, max(len(rhos), 1), figsize=(3.2 * max(len(rhos), 1), 3.0),
                             sharey=True, squeeze=False)
    for ax, rho in zip(axes[0], rhos):
        for m in methods:
            ns = sorted({r.n for r in ok if r.method == m and r.rho == rho})
            med = [table.median_mse(m, rho, n) for n in ns]
            colour, marker = _STYLE[m]
            ax.plot(ns, med, color=colour, marker=marker, label=m)
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_title(f"rho = {rho:g}")
        ax.set_xlabel("training sample size")
    axes[0][0].set_ylabel("median structural MSE")
    if methods:
        axes[0][-1].legend(frameon=False, fontsize="small")
    fig.tight_layout()
    return _save(fig, path)


def plot_band(p, estimate, lower, upper, path: str | Path, truth=None, xlabel: str = "p",
              title: str | None = None) -> Path:
    """Point estimate with a shaded interval; ``truth`` is overlaid when given."""
    order = np.argsort(np.asarray(p, dtype=np.float64))
    p, estimate, lower, upper = (np.asarray(a, dtype=np.float64)[order] for a in (p, estimate, lower, upper))
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.fill_between(p, lower, upper, color="tab:blue", alpha=0.25, linewidth=0, label="interval")
    ax.plot(p, estimate, color="tab:blue", label="estimate")
    if truth is not None:
        ax.plot(p, np.asarray(truth, dtype=np.float64)[order], color="black", linestyle="--", label="truth")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("h")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, fontsize="small")
    fig.tight_layout()
    return _save(fig, path)


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path
