"""Turning scores into selective classifiers.

A point is accepted when its score clears the threshold (score >= tau).
Accept sets are nested in tau, so sweeping tau over the distinct observed
scores visits every achievable accept set; between observed values nothing
changes. All calibration happens on whatever (scores, correctness) pair the
caller supplies, which makes held-out and same-split protocols the caller's
choice.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, TextIO

import numpy as np

__all__ = [
    "SelectiveResult",
    "RiskCoverageCurve",
    "gate",
    "coverage_accuracy",
    "risk_coverage_curve",
    "calibrate_for_error",
    "calibrate_for_coverage",
    "auroc",
    "write_curve_csv",
    "read_curve_csv",
]


@dataclass(frozen=True)
class SelectiveResult:
    """One operating point of a selective classifier.

    ``accuracy`` is None when nothing was accepted (the undefined flag; it is
    deliberately never 0 or 1, either would silently distort calibration) or
    when correctness was not supplied.
    """

    threshold: float
    accept_mask: np.ndarray
    coverage: float
    accuracy: float | None

    @property
    def error(self) -> float | None:
        return None if self.accuracy is None else 1.0 - self.accuracy

    @property
    def is_empty(self) -> bool:
        return not bool(self.accept_mask.any())


@dataclass(frozen=True)
class RiskCoverageCurve:
    """(threshold, coverage, selective error) triples, threshold ascending.

    The first row is the tau = -inf full-coverage point; after it comes one
    row per distinct observed score. Equal scores enter or leave the accept
    set together, so every achievable nonempty accept set appears exactly
    once after the sentinel row.
    """

    thresholds: np.ndarray
    coverages: np.ndarray
    errors: np.ndarray

    def __len__(self) -> int:
        return self.thresholds.shape[0]

    def points(self) -> Iterator[tuple[float, float, float]]:
        for tau, cov, err in zip(self.thresholds, self.coverages, self.errors):
            yield float(tau), float(cov), float(err)


def _as_scores(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise ValueError("scores must be a nonempty 1-D array")
    return scores


def _as_correctness(correctness: np.ndarray, n: int) -> np.ndarray:
    correctness = np.asarray(correctness, dtype=bool)
    if correctness.shape != (n,):
        raise ValueError(f"correctness length {correctness.shape} does not match {n} scores")
    return correctness


def gate(scores: np.ndarray, tau: float) -> np.ndarray:
    """Boolean accept mask: score >= tau. -inf accepts everything, a value
    above the maximum score rejects everything."""
    return _as_scores(scores) >= tau


def coverage_accuracy(mask: np.ndarray, correctness: np.ndarray) -> tuple[float, float | None]:
    """Fraction accepted and accuracy over the accepted points; accuracy is
    None when the accept set is empty."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 1:
        raise ValueError("mask must be 1-D")
    correctness = _as_correctness(correctness, mask.shape[0])
    n = mask.shape[0]
    accepted = int(mask.sum())
    coverage = accepted / n
    if accepted == 0:
        return coverage, None
    correct = int((mask & correctness).sum())
    return coverage, correct / accepted


def risk_coverage_curve(scores: np.ndarray, correctness: np.ndarray) -> RiskCoverageCurve:
    """Sweep tau over -inf plus every distinct score value."""
    scores = _as_scores(scores)
    correctness = _as_correctness(correctness, scores.shape[0])
    n = scores.shape[0]
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    sorted_correct = correctness[order].astype(np.int64)
    # suffix[p] = number of correct examples among the n - p highest scores
    suffix = np.concatenate([np.cumsum(sorted_correct[::-1])[::-1], [0]])
    starts = np.flatnonzero(np.concatenate([[True], sorted_scores[1:] != sorted_scores[:-1]]))

    thresholds = [float("-inf")]
    coverages = [n / n]
    errors = [1.0 - (int(suffix[0]) / n)]
    for p in starts:
        accepted = n - int(p)
        thresholds.append(float(sorted_scores[p]))
        coverages.append(accepted / n)
        errors.append(1.0 - (int(suffix[p]) / accepted))
    return RiskCoverageCurve(
        thresholds=np.asarray(thresholds),
        coverages=np.asarray(coverages),
        errors=np.asarray(errors),
    )


def _empty_result(n: int) -> SelectiveResult:
    return SelectiveResult(
        threshold=math.inf,
        accept_mask=np.zeros(n, dtype=bool),
        coverage=0.0,
        accuracy=None,
    )


def calibrate_for_error(
    scores: np.ndarray, correctness: np.ndarray, target_error: float
) -> tuple[float, SelectiveResult]:
    """Largest-coverage threshold whose selective error stays within target.

    Ties between thresholds with equal coverage go to the lower threshold.
    When even the smallest nonempty accept set exceeds the target, the
    empty-accept result (threshold +inf, accuracy None) is returned.
    """
    if not 0.0 <= target_error < 1.0:
        raise ValueError("target_error must lie in [0, 1)")
    scores = _as_scores(scores)
    correctness = _as_correctness(correctness, scores.shape[0])
    curve = risk_coverage_curve(scores, correctness)
    best = None
    for idx in range(len(curve)):
        if curve.errors[idx] <= target_error and (
            best is None or curve.coverages[idx] > curve.coverages[best]
        ):
            best = idx
    if best is None:
        return math.inf, _empty_result(scores.shape[0])
    tau = float(curve.thresholds[best])
    mask = gate(scores, tau)
    coverage, accuracy = coverage_accuracy(mask, correctness)
    return tau, SelectiveResult(threshold=tau, accept_mask=mask, coverage=coverage, accuracy=accuracy)


def calibrate_for_coverage(
    scores: np.ndarray, target_coverage: float, correctness: np.ndarray | None = None
) -> tuple[float, SelectiveResult]:
    """Smallest accept set with coverage at least the target.

    The threshold is the largest distinct score value whose accept set is big
    enough; equal scores move together, so achieved coverage can overshoot
    the target and is reported as is. Accuracy is filled in when correctness
    is supplied.
    """
    if not 0.0 < target_coverage <= 1.0:
        raise ValueError("target_coverage must lie in (0, 1]")
    scores = _as_scores(scores)
    n = scores.shape[0]
    for value in np.unique(scores)[::-1]:
        mask = scores >= value
        accepted = int(mask.sum())
        if accepted / n >= target_coverage:
            tau = float(value)
            if correctness is None:
                return tau, SelectiveResult(
                    threshold=tau, accept_mask=mask, coverage=accepted / n, accuracy=None
                )
            coverage, accuracy = coverage_accuracy(mask, correctness)
            return tau, SelectiveResult(
                threshold=tau, accept_mask=mask, coverage=coverage, accuracy=accuracy
            )
    # unreachable: the minimum score always yields coverage 1
    raise AssertionError("no threshold reached the target coverage")


def auroc(scores: np.ndarray, correctness: np.ndarray) -> float:
    """Probability a random correct point outscores a random incorrect one,
    ties counted one half (Mann-Whitney U form)."""
    scores = _as_scores(scores)
    correctness = _as_correctness(correctness, scores.shape[0])
    n_pos = int(correctness.sum())
    n_neg = int(scores.shape[0] - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs both correct and incorrect examples")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    group_start = np.concatenate([[0], np.cumsum(counts)[:-1]])
    avg_rank = group_start + (counts + 1) / 2.0  # 1-based average rank per tie group
    ranks = avg_rank[inverse]
    u = float(ranks[correctness].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def write_curve_csv(curve: RiskCoverageCurve, destination: str | Path | TextIO) -> None:
    """Columns: tau, coverage, selective_error."""
    if hasattr(destination, "write"):
        _write_curve_stream(curve, destination)  # type: ignore[arg-type]
        return
    with open(destination, "w", newline="") as fh:
        _write_curve_stream(curve, fh)


def _write_curve_stream(curve: RiskCoverageCurve, fh: TextIO) -> None:
    writer = csv.writer(fh)
    writer.writerow(["tau", "coverage", "selective_error"])
    for tau, cov, err in curve.points():
        writer.writerow([repr(tau), repr(cov), repr(err)])


def read_curve_csv(path: str | Path) -> RiskCoverageCurve:
    thresholds, coverages, errors = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        head = next(reader, None)
        if head != ["tau", "coverage", "selective_error"]:
            raise ValueError(f"{path}: not a risk-coverage curve CSV")
        for row in reader:
            thresholds.append(float(row[0]))
            coverages.append(float(row[1]))
            errors.append(float(row[2]))
    if not thresholds:
        raise ValueError(f"{path}: no curve rows")
    return RiskCoverageCurve(
        thresholds=np.asarray(thresholds),
        coverages=np.asarray(coverages),
        errors=np.asarray(errors),
    )
