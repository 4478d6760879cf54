"""Report figures rendered to files alongside the JSON/CSV outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

__all__ = ["render_bands_figure", "render_simulation_figure"]


def render_bands_figure(band: dict, path: str) -> None:
    """Interval plot of simultaneous confidence bands (one errorbar per j)."""
    intervals = band["intervals"]
    js = [iv["j"] for iv in intervals]
    mid = [iv["beta_check"] for iv in intervals]
    lo = [iv["beta_check"] - iv["lo"] for iv in intervals]
    hi = [iv["hi"] - iv["beta_check"] for iv in intervals]
    fig, ax = plt.subplots(figsize=(6, 3.5), dpi=150)
    ax.errorbar(js, mid, yerr=[lo, hi], fmt="o", capsize=4, color="C0")
    ax.axhline(0.0, color="0.6", lw=0.8, zorder=0)
    ax.set_xlabel("coefficient index j")
    ax.set_ylabel("debiased estimate")
    ax.set_xticks(js)
    ax.set_title(
        f"simultaneous {100 * (1 - band['alpha']):g}% band, "
        f"c* = {band['critical_value']:.3f}"
    )
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def render_simulation_figure(summary: dict, path: str) -> None:
    """Bias bars with rejection-probability annotation for one MC summary."""
    S = summary["S"]
    bias = summary["bias"]
    se = summary["bias_se"]
    fig, ax = plt.subplots(figsize=(6, 3.5), dpi=150)
    ax.bar([str(j) for j in S], bias, yerr=[2 * e for e in se],
           color="C0", capsize=4)
    ax.axhline(0.0, color="0.4", lw=0.8)
    ax.set_xlabel("coefficient index j")
    ax.set_ylabel("bias of debiased estimate")
    ax.set_title(
        f"n={summary['n']} p={summary['p']} K={summary['K']} L={summary['L']}: "
        f"rp({summary['alpha']:.2f})={summary['rp05']:.3f}, "
        f"linf={summary['linf']:.4f}"
    )
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
