"""Training-dynamics statistics over a trace and the disagreement probability bound.

For each checkpoint t, the disagreement indicator over a population of
examples is a Bernoulli variable; its mean e_t and variance v_t = e_t(1-e_t)
summarize how consistently that population already agrees with the final
prediction. Finally-correct and finally-incorrect examples are profiled
separately because their curves behave very differently late in training.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import TextIO

import numpy as np

from .trace import PredictionTrace, disagreement_matrix

# a_t is exactly 0 or 1 while e_t is an estimated float; "a_t equals e_t" is
# therefore a tolerance comparison
EQUALITY_TOL = 1e-12

__all__ = [
    "EQUALITY_TOL",
    "BoundUndefinedError",
    "DynamicsProfile",
    "estimate_dynamics",
    "markov_bound",
    "simulate_disagreement_process",
    "write_profile_csv",
    "read_profile_csv",
]


class BoundUndefinedError(ValueError):
    """The observed sequence matches the expected one everywhere the bound
    would look, so no informative term exists."""


@dataclass(frozen=True)
class DynamicsProfile:
    """Per-checkpoint disagreement mean/variance for both populations.

    Sequences are None when the corresponding population is empty. Where
    present, v_t = e_t(1-e_t) holds exactly (the indicators are Bernoulli and
    the variance is the population variance, not the sample variance).
    """

    e_correct: np.ndarray | None
    v_correct: np.ndarray | None
    e_incorrect: np.ndarray | None
    v_incorrect: np.ndarray | None
    n_correct: int | None
    n_incorrect: int | None

    @property
    def n_checkpoints(self) -> int:
        for seq in (self.e_correct, self.e_incorrect):
            if seq is not None:
                return seq.shape[0]
        raise ValueError("profile has no populations")


def _population_stats(disagreements: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    e = disagreements.mean(axis=1, dtype=np.float64)
    v = disagreements.var(axis=1, dtype=np.float64)
    return e, v


def estimate_dynamics(trace: PredictionTrace) -> DynamicsProfile:
    """Empirical e_t and v_t, split by final-prediction correctness.

    Correctness is judged against the final model: example i is in the
    correct population iff the last checkpoint's label matches its true
    label. Each population is weighted uniformly.
    """
    if trace.true_labels is None:
        raise ValueError("estimating dynamics requires a trace with true labels")
    disagreements = disagreement_matrix(trace)
    correct = trace.final_labels == trace.true_labels
    n_correct = int(correct.sum())
    n_incorrect = int(trace.n_examples - n_correct)

    e_c = v_c = e_i = v_i = None
    if n_correct:
        e_c, v_c = _population_stats(disagreements[:, correct])
    if n_incorrect:
        e_i, v_i = _population_stats(disagreements[:, ~correct])
    return DynamicsProfile(
        e_correct=e_c,
        v_correct=v_c,
        e_incorrect=e_i,
        v_incorrect=v_i,
        n_correct=n_correct,
        n_incorrect=n_incorrect,
    )


def markov_bound(a: np.ndarray, e: np.ndarray, v: np.ndarray) -> float:
    """Upper bound on the probability of observing disagreement sequence ``a``
    under per-checkpoint means ``e`` and variances ``v``.

    Each checkpoint where a_t differs from e_t bounds the single-step event
    by v_t / |a_t - e_t|^2 (Chebyshev form of Markov's inequality); the
    tightest such term is returned, clamped at 1 since anything larger is a
    vacuous probability bound.
    """
    a = np.asarray(a, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if not (a.shape == e.shape == v.shape) or a.ndim != 1:
        raise ValueError("a, e, v must be 1-D sequences of equal length")
    if np.any(v < 0.0):
        raise ValueError("variances must be non-negative")
    if e.min() < 0.0 or e.max() > 1.0:
        raise ValueError("means must lie in [0, 1]")
    gap = np.abs(a - e)
    informative = gap > EQUALITY_TOL
    if not informative.any():
        raise BoundUndefinedError(
            "a_t equals e_t at every checkpoint; the bound is undefined"
        )
    return float(min(np.min(v[informative] / gap[informative] ** 2), 1.0))


def simulate_disagreement_process(
    e: np.ndarray, n_samples: int, seed: int = 0
) -> np.ndarray:
    """Independent Bernoulli(e_t) draws per step: an (n_samples, T) binary
    matrix. Used as a Monte-Carlo oracle for the bound; requires e_T = 0
    because the final checkpoint agrees with itself by construction.
    """
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 1 or e.size == 0:
        raise ValueError("e must be a nonempty 1-D sequence")
    if e.min() < 0.0 or e.max() > 1.0:
        raise ValueError("means must lie in [0, 1]")
    if abs(e[-1]) > EQUALITY_TOL:
        raise ValueError("e_T must be 0: final agreement is structural")
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    rng = np.random.default_rng(seed)
    return (rng.random((n_samples, e.size)) < e).astype(np.uint8)


def _cell(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def write_profile_csv(profile: DynamicsProfile, destination: str | Path | TextIO) -> None:
    """Rows (t, e_correct, v_correct, e_incorrect, v_incorrect) with t = 1..T;
    absent populations leave their cells empty."""
    if hasattr(destination, "write"):
        _write_profile_stream(profile, destination)  # type: ignore[arg-type]
        return
    with open(destination, "w", newline="") as fh:
        _write_profile_stream(profile, fh)


def _write_profile_stream(profile: DynamicsProfile, fh: TextIO) -> None:
    writer = csv.writer(fh)
    writer.writerow(["t", "e_correct", "v_correct", "e_incorrect", "v_incorrect"])
    for idx in range(profile.n_checkpoints):
        writer.writerow(
            [
                idx + 1,
                _cell(None if profile.e_correct is None else profile.e_correct[idx]),
                _cell(None if profile.v_correct is None else profile.v_correct[idx]),
                _cell(None if profile.e_incorrect is None else profile.e_incorrect[idx]),
                _cell(None if profile.v_incorrect is None else profile.v_incorrect[idx]),
            ]
        )


def read_profile_csv(path: str | Path) -> DynamicsProfile:
    """Re-ingest a dynamics CSV. Population sizes are not stored in the file;
    they come back as 0 for absent populations and None otherwise."""
    rows: list[list[str]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        head = next(reader, None)
        if head != ["t", "e_correct", "v_correct", "e_incorrect", "v_incorrect"]:
            raise ValueError(f"{path}: not a dynamics profile CSV")
        rows = [row for row in reader if row]
    if not rows:
        raise ValueError(f"{path}: no data rows")

    def column(idx: int) -> np.ndarray | None:
        cells = [row[idx] for row in rows]
        if all(c == "" for c in cells):
            return None
        return np.asarray([float(c) for c in cells])

    e_c, v_c, e_i, v_i = column(1), column(2), column(3), column(4)
    return DynamicsProfile(
        e_correct=e_c,
        v_correct=v_c,
        e_incorrect=e_i,
        v_incorrect=v_i,
        n_correct=0 if e_c is None else None,
        n_incorrect=0 if e_i is None else None,
    )
