"""Figures for training and benchmark reports, rendered off-screen to files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_convergence", "plot_scaling"]


def _style(ax):
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    ax.grid(True, which="major", alpha=0.3)


def plot_convergence(report, path) -> None:
    """Barrier parameter and residual norms against iteration, log scale."""
    hist = report.history
    it = np.array([h.iteration for h in hist])
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    if hist:
        ax.semilogy(it, [h.mu for h in hist], "k-", lw=1.5, label="mu")
        ax.semilogy(it, [max(h.r_w, abs(h.rho_beta)) for h in hist], "--", lw=1, label="dual residual")
        ax.semilogy(it, [max(h.r_v, h.r_z) for h in hist], ":", lw=1, label="primal residual")
    ax.set_xlabel("iteration")
    ax.set_ylabel("value")
    ax.set_title(f"n={report.n}, m={report.m}, p={report.p}", fontsize=9)
    ax.legend(frameon=False, fontsize=8)
    _style(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_scaling(rows, path) -> None:
    """Per-iteration time and speedup against worker count.

    ``rows`` are dicts with at least ``p`` and ``seconds_per_iteration``.
    """
    p = np.array([r["p"] for r in rows], dtype=float)
    t = np.array([r["seconds_per_iteration"] for r in rows], dtype=float)
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(7.0, 3.0))
    a1.plot(p, t, "ko-", lw=1.2)
    a1.set_xlabel("workers")
    a1.set_ylabel("seconds per iteration")
    base = t[p == p.min()][0] if t.size else 1.0
    a2.plot(p, base / t, "ko-", lw=1.2, label="measured")
    a2.plot(p, p / p.min(), "k:", lw=1, label="linear")
    a2.set_xlabel("workers")
    a2.set_ylabel("speedup")
    a2.legend(frameon=False, fontsize=8)
    for ax in (a1, a2):
        ax.set_xticks(p)
        _style(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
