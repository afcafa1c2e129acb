"""Report figures rendered to files (Agg backend, no display needed)."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_series(cells, path, column: str = "avg_Q", reference: Optional[float] = None) -> Path:
    """One line per (method, seed) run of a RunRecord column against episode."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for c in cells:
        if c.record is None or not c.record.rows:
            continue
        ep = [r.episode for r in c.record.rows]
        ax.plot(ep, [getattr(r, column) for r in c.record.rows], lw=1, label=f"{c.method} s{c.seed}")
        if c.record.converged and column == "avg_Q":
            k = c.record.episodes_to_convergence
            ax.plot([k], [c.record.rows[k - 1].avg_Q], "k.", ms=6)
    if reference is not None and np.isfinite(reference):
        ax.axhline(reference, color="k", ls="--", lw=1, label="exact")
    ax.set_xlabel("episode")
    ax.set_ylabel(column)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_comparison(rows, path) -> Path:
    """Mean final average-Q per method, with the per-seed spread as error bars."""
    groups = defaultdict(list)
    oracle = None
    for r in rows:
        groups[r["method"]].append(r["average_Q"])
        if np.isfinite(r["oracle_average_V"]):
            oracle = r["oracle_average_V"]
    methods = list(groups)
    means = [np.mean(groups[m]) for m in methods]
    spread = [np.ptp(groups[m]) / 2 for m in methods]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(methods, means, yerr=spread, color="0.6", capsize=4)
    if oracle is not None:
        ax.axhline(oracle, color="k", ls="--", lw=1)
    ax.set_ylabel("final average Q")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path
