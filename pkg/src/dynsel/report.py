"""Figure rendering for reports. Every plot lands next to the CSV it draws from."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .dynamics import DynamicsProfile
from .scores import ScoredSet
from .selective import RiskCoverageCurve

__all__ = [
    "save_risk_coverage_figure",
    "save_score_distribution_figure",
    "save_dynamics_figure",
    "save_k_sweep_figure",
    "save_resolution_figure",
]

_DPI = 150


def _finish(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def save_risk_coverage_figure(curves: Mapping[str, RiskCoverageCurve], path: str | Path) -> Path:
    """Selective error as a function of coverage, one line per method."""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for name in sorted(curves):
        curve = curves[name]
        order = np.argsort(curve.coverages)
        ax.plot(curve.coverages[order], curve.errors[order], marker=".", markersize=3,
                linewidth=1.2, label=name)
    ax.set_xlabel("coverage")
    ax.set_ylabel("selective error")
    ax.set_xlim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    return _finish(fig, path)


def save_score_distribution_figure(scored: ScoredSet, path: str | Path) -> Path:
    """Score histograms for finally-correct vs finally-incorrect examples."""
    correctness = scored.correctness()
    fig, ax = plt.subplots(figsize=(6, 4))
    bins = np.linspace(float(scored.scores.min()), float(scored.scores.max()) or 1.0, 40)
    if bins[0] == bins[-1]:
        bins = np.linspace(bins[0] - 0.5, bins[0] + 0.5, 40)
    ax.hist(scored.scores[correctness], bins=bins, alpha=0.6, label="correct", density=True)
    ax.hist(scored.scores[~correctness], bins=bins, alpha=0.6, label="incorrect", density=True)
    ax.set_xlabel(f"score ({scored.method_id})")
    ax.set_ylabel("density")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    return _finish(fig, path)


def save_dynamics_figure(profile: DynamicsProfile, path: str | Path) -> Path:
    """Disagreement mean and variance per checkpoint for both populations."""
    fig, (ax_e, ax_v) = plt.subplots(1, 2, figsize=(9, 4))
    t = np.arange(1, profile.n_checkpoints + 1)
    for ax, correct_seq, incorrect_seq, title in (
        (ax_e, profile.e_correct, profile.e_incorrect, "mean disagreement e_t"),
        (ax_v, profile.v_correct, profile.v_incorrect, "disagreement variance v_t"),
    ):
        if correct_seq is not None:
            ax.plot(t, correct_seq, label=f"correct (n={profile.n_correct})", linewidth=1.2)
        if incorrect_seq is not None:
            ax.plot(t, incorrect_seq, label=f"incorrect (n={profile.n_incorrect})", linewidth=1.2)
        ax.set_xlabel("checkpoint")
        ax.set_title(title, fontsize=10)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
    return _finish(fig, path)


def save_k_sweep_figure(rows: Sequence[dict], path: str | Path) -> Path:
    """Mean coverage vs weight exponent k, one line per target error."""
    targets = sorted({r["target"] for r in rows if r["target_kind"] == "error"})
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for target in targets:
        pts = sorted(
            (float(r["k"]), float(r["coverage"]))
            for r in rows
            if r["target_kind"] == "error" and r["target"] == target and r["coverage"] != ""
        )
        if pts:
            ks, covs = zip(*pts)
            ax.plot(ks, covs, marker="o", markersize=3, linewidth=1.2,
                    label=f"target error {float(target):g}")
    ax.set_xscale("log")
    ax.set_xlabel("weight exponent k")
    ax.set_ylabel("coverage at target error")
    ax.grid(alpha=0.3, which="both")
    ax.legend(fontsize=8)
    return _finish(fig, path)


def save_resolution_figure(rows: Sequence[dict], path: str | Path) -> Path:
    """Mean selective error vs checkpoint count, one line per target coverage."""
    targets = sorted({r["target"] for r in rows if r["target_kind"] == "coverage"})
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for target in targets:
        pts = sorted(
            (int(r["n_checkpoints"]), float(r["error"]))
            for r in rows
            if r["target_kind"] == "coverage" and r["target"] == target and r["error"] != ""
        )
        if pts:
            counts, errs = zip(*pts)
            ax.plot(counts, errs, marker="o", markersize=3, linewidth=1.2,
                    label=f"target coverage {float(target):g}")
    ax.set_xlabel("checkpoints used")
    ax.set_ylabel("selective error at target coverage")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    return _finish(fig, path)
