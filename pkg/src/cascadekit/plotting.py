"""Render deferral-curve figures next to the CSV reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .evaluation import DeferralCurve


def render_curves(
    curves: Sequence[DeferralCurve],
    out_path: str | Path,
    dpi: int = 150,
) -> Path:
    """Plot quality, expected cost, and expected latency against the
    deferral rate, one line per policy, and save the figure.

    The CSV report stays the machine-readable contract; this figure is the
    human-readable view of the same points.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)

    fig, axes = plt.subplots(1, 3, figsize=(13.5, 4.0), sharex=True)
    panels = [
        ("quality", "Quality", lambda p: p.quality),
        ("cost", "Expected cost / query", lambda p: p.expected_cost),
        ("latency", "Expected latency (ms)", lambda p: p.expected_latency_ms),
    ]
    for ax, (_, ylabel, getter) in zip(axes, panels):
        for curve in sorted(curves, key=lambda c: c.policy_id):
            rates = [p.rate for p in curve.points]
            ax.plot(rates, [getter(p) for p in curve.points], label=curve.policy_id)
        ax.set_xlabel("Deferral rate")
        ax.set_ylabel(ylabel)
        ax.set_xlim(0.0, 1.0)
        ax.grid(True, alpha=0.3)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=dpi)
    plt.close(fig)
    return out_path
