"""Figures for defense reports."""

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from madbench.errors import DataError  # noqa: E402


def plot_edsr_curves(reports, path, horizon_hours=None):
    """DSR * exp(-OT) against OT, one curve per method, each method's own OT marked.

    At OT = 0 the curve starts at the method's mean DSR.
    """
    if not reports:
        raise DataError("nothing to plot")
    ots = [r.aggregates["all"]["ot_hours"] for r in reports]
    horizon = horizon_hours or max(1.0, 1.5 * max(ots))
    grid = np.linspace(0.0, horizon, 200)
    fig, ax = plt.subplots(figsize=(6, 4))
    for rep, ot in zip(reports, ots):
        dsr = rep.aggregates["all"]["dsr"]
        line, = ax.plot(grid, 100 * dsr * np.exp(-grid), label=rep.method)
        ax.scatter([ot], [100 * dsr * math.exp(-ot)], color=line.get_color(), zorder=3)
    ax.set_xlabel("OT (h)")
    ax.set_ylabel("EDSR (%)")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_dsr_by_attack(reports, path):
    """Grouped bars of per-attack DSR and EDSR for each method."""
    if not reports:
        raise DataError("nothing to plot")
    attacks = sorted({r.attack_id for rep in reports for r in rep.records})
    width = 0.8 / len(reports)
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
    for i, rep in enumerate(reports):
        by_id = {r.attack_id: r for r in rep.records}
        xs = np.arange(len(attacks)) + i * width
        for ax, key in zip(axes, ("dsr", "edsr")):
            ax.bar(xs, [100 * getattr(by_id[a], key) if a in by_id else 0 for a in attacks], width, label=rep.method)
    for ax, title in zip(axes, ("DSR (%)", "EDSR (%)")):
        ax.set_xticks(np.arange(len(attacks)) + 0.4 - width / 2)
        ax.set_xticklabels([str(a) for a in attacks])
        ax.set_xlabel("attack id")
        ax.set_title(title)
    axes[0].legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
