"""Figure rendering for calibration traces and detection reports.

All functions write PNG files next to the delimited outputs; nothing here
is needed for the numeric pipeline, so importing matplotlib stays local to
this module.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

__all__ = [
    "save_trace_figure",
    "save_loss_curve_figure",
    "save_detection_overview",
]


def save_trace_figure(trace, path) -> None:
    """Best/mean search loss per generation."""
    generations = [r.generation for r in trace]
    best = [r.best_value for r in trace]
    mean = [r.mean_value for r in trace]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(generations, best, marker="o", label="best loss")
    ax.plot(generations, mean, marker=".", linestyle="--", label="mean loss")
    ax.set_xlabel("generation")
    ax.set_ylabel("self-consistency loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_curve_figure(report, path) -> None:
    """Sweep loss over candidate split cycles for one unit."""
    candidates = range(1, len(report.loss_curve) + 1)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(candidates, report.loss_curve, lw=1)
    ax.axvline(report.change_cycle, color="tab:red", linestyle=":",
               label=f"change cycle {report.change_cycle}")
    ax.set_xlabel("candidate change cycle")
    ax.set_ylabel("sweep loss")
    ax.set_title(f"unit {report.unit_id}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_detection_overview(reports, path) -> None:
    """Fleet view: lifespan bars with the detected change point marked."""
    fig, ax = plt.subplots(figsize=(7, max(3, 0.12 * len(reports) + 1.5)))
    for row, r in enumerate(reports):
        ax.hlines(row, 1, r.cycles, color="0.85", lw=2)
        ax.plot(r.change_cycle, row, "o", color="tab:blue", ms=3)
    ax.set_xlabel("cycle")
    ax.set_ylabel("unit (input order)")
    ax.set_yticks([])
    ax.set_title("detected change points")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ensure_dir(path) -> None:
    os.makedirs(path, exist_ok=True)
