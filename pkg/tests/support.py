"""Shared test helpers: random trace construction and brute-force oracles.

The oracles enumerate thresholds directly from the gate definition and never
touch the library's sorting-based implementations, so agreement between the
two is a real check, not a tautology.
"""

from __future__ import annotations

import numpy as np

from dynsel.trace import PredictionTrace


def make_random_trace(
    rng: np.random.Generator,
    n_checkpoints: int = 5,
    n_examples: int = 4,
    n_classes: int = 3,
    with_probabilities: bool = True,
    with_true_labels: bool = True,
) -> PredictionTrace:
    logits = rng.standard_normal((n_checkpoints, n_examples, n_classes))
    shifted = logits - logits.max(axis=2, keepdims=True)
    probs = np.exp(shifted)
    probs = (probs / probs.sum(axis=2, keepdims=True)).astype(np.float32)
    labels = probs.argmax(axis=2).astype(np.uint16)
    return PredictionTrace(
        labels=labels,
        checkpoint_steps=np.arange(1, n_checkpoints + 1) * 10,
        n_classes=n_classes,
        probabilities=probs if with_probabilities else None,
        true_labels=rng.integers(0, n_classes, n_examples).astype(np.uint16)
        if with_true_labels
        else None,
        seed=int(rng.integers(0, 2**31)),
    )


def random_instance(rng: np.random.Generator, max_n: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Random (scores, correctness) pair; about half the instances carry ties."""
    n = int(rng.integers(1, max_n + 1))
    if rng.random() < 0.5:
        scores = rng.choice(np.round(rng.standard_normal(max(2, n // 3)), 3), size=n)
    else:
        scores = rng.standard_normal(n)
    correctness = rng.random(n) < rng.uniform(0.1, 0.9)
    return np.asarray(scores, dtype=np.float64), correctness


def brute_force_curve(scores: np.ndarray, correctness: np.ndarray) -> list[tuple[float, float, float]]:
    """Evaluate the gate at -inf and every distinct score by direct counting."""
    n = len(scores)
    rows = []
    for tau in [float("-inf")] + sorted({float(s) for s in scores}):
        mask = scores >= tau
        accepted = int(mask.sum())
        coverage = accepted / n
        error = 1.0 - (int((mask & correctness).sum()) / accepted)
        rows.append((tau, coverage, error))
    return rows


def brute_force_calibrate_error(
    scores: np.ndarray, correctness: np.ndarray, target: float
) -> tuple[float, float, float] | None:
    """(tau, coverage, error) maximizing coverage under the error target,
    ties resolved toward the lower threshold; None when infeasible."""
    best = None
    for tau, coverage, error in brute_force_curve(scores, correctness):
        if error <= target and (best is None or coverage > best[1]):
            best = (tau, coverage, error)
    return best


def brute_force_calibrate_coverage(scores: np.ndarray, target: float) -> float:
    """Largest distinct score whose accept set reaches the target coverage."""
    n = len(scores)
    for tau in sorted({float(s) for s in scores}, reverse=True):
        if int((scores >= tau).sum()) / n >= target:
            return tau
    raise AssertionError("unreachable: the minimum score covers everything")


def brute_force_auroc(scores: np.ndarray, correctness: np.ndarray) -> float:
    pos = scores[correctness]
    neg = scores[~correctness]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))
