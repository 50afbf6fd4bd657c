"""Selection scores computed from a prediction trace.

All scores share one orientation: higher means more acceptable, and a point
is accepted when its score clears the threshold (score >= tau). Label-based
scores live in [0, 1]; a point whose checkpoints never disagree with the
final prediction gets the sentinel 1.0, which sits strictly above every
achievable weight, so such points survive any admissible threshold.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import TextIO

import numpy as np

from .dynamics import BoundUndefinedError, EQUALITY_TOL
from .trace import PredictionTrace, disagreement_matrix

NO_DISAGREEMENT_SCORE = 1.0
DEFAULT_K = 0.05
CONTINUOUS_METRICS = ("confidence", "gap", "negative_entropy")
SCORE_METHODS = ("min", "avg", "jump", "var", "softmax_response")

__all__ = [
    "NO_DISAGREEMENT_SCORE",
    "DEFAULT_K",
    "CONTINUOUS_METRICS",
    "SCORE_METHODS",
    "WeightSchedule",
    "EtModel",
    "ScoredSet",
    "weight_schedule",
    "variance_weights",
    "score_min",
    "score_avg",
    "score_jump",
    "continuous_metric",
    "score_var",
    "softmax_response",
    "score_trace",
    "method_id",
    "write_scored_csv",
    "read_scored_csv",
    "write_scored_json",
]


@dataclass(frozen=True)
class WeightSchedule:
    """Checkpoint weights v_t = 1 - (t/T)^k for t = 1..T.

    The checkpoint index is normalized by T so any trace length maps onto
    (0, 1]; the sequence is strictly decreasing with v_T = 0. Exponents in
    (0, 1] give the convex shape, k >= 1 the concave one.
    """

    values: np.ndarray
    k: float

    def __post_init__(self) -> None:
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> str:
        return "convex" if self.k <= 1.0 else "concave"


def weight_schedule(n_checkpoints: int, k: float) -> WeightSchedule:
    if n_checkpoints < 1:
        raise ValueError("n_checkpoints must be at least 1")
    if k <= 0:
        raise ValueError(f"weight exponent k must be positive, got {k}")
    t = np.arange(1, n_checkpoints + 1, dtype=np.float64)
    return WeightSchedule(values=1.0 - (t / n_checkpoints) ** k, k=k)


def variance_weights(n_checkpoints: int, k_w: float = 1.0) -> np.ndarray:
    """Increasing weights w_t = (t/T)^k_w for the variance score."""
    if n_checkpoints < 1:
        raise ValueError("n_checkpoints must be at least 1")
    if k_w <= 0:
        raise ValueError(f"variance weight exponent must be positive, got {k_w}")
    t = np.arange(1, n_checkpoints + 1, dtype=np.float64)
    return (t / n_checkpoints) ** k_w


@dataclass(frozen=True)
class EtModel:
    """Expected-disagreement model used by the adjusted min/avg scores.

    ``zero`` assumes no expected disagreement anywhere (the default and what
    the plain scores use implicitly). ``empirical`` carries a measured
    length-T sequence, ``smooth`` a decay 1 - (t/T)^exponent. Both end at 0:
    the final checkpoint always agrees with itself.
    """

    variant: str = "zero"
    empirical_values: np.ndarray | None = None
    exponent: float | None = None

    @classmethod
    def zero(cls) -> "EtModel":
        return cls(variant="zero")

    @classmethod
    def empirical(cls, values) -> "EtModel":
        arr = np.ascontiguousarray(values, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("empirical e_t values must be a nonempty 1-D sequence")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("e_t values must lie in [0, 1]")
        if abs(arr[-1]) > EQUALITY_TOL:
            raise ValueError("e_T must be 0: the final checkpoint agrees with itself")
        arr.flags.writeable = False
        return cls(variant="empirical", empirical_values=arr)

    @classmethod
    def smooth(cls, exponent: float) -> "EtModel":
        if exponent <= 0:
            raise ValueError("smooth e_t exponent must be positive")
        return cls(variant="smooth", exponent=exponent)

    @property
    def is_zero(self) -> bool:
        return self.variant == "zero"

    def resolve(self, n_checkpoints: int) -> np.ndarray | None:
        if self.variant == "zero":
            return None
        if self.variant == "empirical":
            assert self.empirical_values is not None
            if self.empirical_values.shape[0] != n_checkpoints:
                raise ValueError(
                    f"empirical e_t has length {self.empirical_values.shape[0]}, "
                    f"trace has {n_checkpoints} checkpoints"
                )
            return self.empirical_values
        t = np.arange(1, n_checkpoints + 1, dtype=np.float64)
        return 1.0 - (t / n_checkpoints) ** float(self.exponent)

    def describe(self) -> str:
        if self.variant == "smooth":
            return f"smooth{self.exponent:g}"
        return self.variant


def _check_lengths(a: np.ndarray, v: WeightSchedule) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 1 or a.shape[0] != len(v):
        raise ValueError(f"disagreement vector length {a.shape} does not match schedule length {len(v)}")
    return a != 0


def _adjusted_values(weights: np.ndarray, e_at_disagreement: np.ndarray) -> np.ndarray:
    """Per-checkpoint bound terms v_t / |1 - e_t|^2 at disagreeing steps,
    clamped into [0, 1]. Steps where e_t coincides with the disagreement
    value carry no information and are dropped; if none survive, the bound
    is undefined."""
    denom = np.abs(1.0 - e_at_disagreement)
    valid = denom > EQUALITY_TOL
    if not valid.any():
        raise BoundUndefinedError(
            "expected disagreement equals the observed disagreement at every "
            "disagreeing checkpoint; the score is undefined"
        )
    return np.clip(weights[valid] / denom[valid] ** 2, 0.0, 1.0)


def score_min(a: np.ndarray, v: WeightSchedule, e: EtModel | None = None) -> float:
    """Weight of the last checkpoint that disagreed with the final prediction.

    Since v is decreasing, min over disagreeing checkpoints is the weight at
    the latest disagreement. With an expected-disagreement model e, each term
    becomes v_t / |1 - e_t|^2, clamped into [0, 1].
    """
    disagree = _check_lengths(a, v)
    if not disagree.any():
        return NO_DISAGREEMENT_SCORE
    weights = v.values[disagree]
    if e is None or e.is_zero:
        return float(weights.min())
    e_values = e.resolve(len(v))
    assert e_values is not None
    return float(_adjusted_values(weights, e_values[disagree]).min())


def score_avg(a: np.ndarray, v: WeightSchedule, e: EtModel | None = None) -> float:
    """Average weight over all checkpoints that disagreed with the final
    prediction. Late disagreements drag the average down because their
    weights are small, and every extra disagreement grows the denominator.
    """
    disagree = _check_lengths(a, v)
    if not disagree.any():
        return NO_DISAGREEMENT_SCORE
    weights = v.values[disagree]
    if e is None or e.is_zero:
        return float(weights.sum() / weights.size)
    e_values = e.resolve(len(v))
    assert e_values is not None
    adjusted = _adjusted_values(weights, e_values[disagree])
    return float(adjusted.sum() / adjusted.size)


def score_jump(labels_column: np.ndarray, v: WeightSchedule, normalized: bool = False) -> float:
    """Penalty for label changes between successive checkpoints.

    j_t = 1 when checkpoint t predicts differently from checkpoint t-1
    (defined for t = 2..T); the score is 1 - sum(v_t * j_t), clamped below at
    0 so long oscillating traces cannot go negative. The normalized variant
    divides the penalty by sum(v_t) over t >= 2 before subtracting.
    """
    labels_column = np.asarray(labels_column)
    if labels_column.ndim != 1 or labels_column.shape[0] != len(v):
        raise ValueError("labels column length must match the schedule length")
    if len(v) < 2:
        raise ValueError("jump score needs at least two checkpoints")
    jumps = labels_column[1:] != labels_column[:-1]
    penalty = float(v.values[1:][jumps].sum())
    if normalized:
        total = float(v.values[1:].sum())
        penalty = penalty / total if total > 0.0 else 0.0
    return max(1.0 - penalty, 0.0)


def _check_distribution(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] < 2:
        raise ValueError("expected a probability vector over at least two classes")
    if p.min() < -1e-9 or p.max() > 1.0 + 1e-9:
        raise ValueError("probabilities must lie in [0, 1]")
    if abs(float(p.sum()) - 1.0) > 1e-6:
        raise ValueError(f"probabilities must sum to 1, got {float(p.sum())}")
    return p


def continuous_metric(p: np.ndarray, kind: str) -> float:
    """Scalar summary of one checkpoint's probability vector.

    confidence: top class probability. gap: top minus second probability.
    negative_entropy: sum p log p with 0 log 0 = 0 (so larger is more peaked).
    """
    p = _check_distribution(p)
    if kind == "confidence":
        return float(p.max())
    if kind == "gap":
        top2 = np.sort(p)[-2:]
        return float(top2[1] - top2[0])
    if kind == "negative_entropy":
        return float(np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0).sum())
    raise ValueError(f"unknown continuous metric {kind!r}, expected one of {CONTINUOUS_METRICS}")


def score_var(z: np.ndarray, w: np.ndarray) -> float:
    """Negated weighted variance of a per-checkpoint metric sequence.

    The mean is unweighted; the weights (non-negative, non-decreasing) make
    late fluctuations cost more. Negation keeps the shared orientation:
    constant sequences get the maximal score 0.
    """
    z = np.asarray(z, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if z.ndim != 1 or z.shape != w.shape:
        raise ValueError(f"metric sequence shape {z.shape} does not match weights {w.shape}")
    if w.min() < 0.0 or np.any(np.diff(w) < 0.0):
        raise ValueError("weights must be non-negative and non-decreasing")
    mu = z.sum() / z.size
    return float(-(w * (z - mu) ** 2).sum())


def softmax_response(p_final: np.ndarray) -> float:
    """Baseline score: the final model's top softmax probability."""
    return float(_check_distribution(p_final).max())


@dataclass(frozen=True)
class ScoredSet:
    """Per-example scores for one method, with enough context to evaluate."""

    method: str
    params: dict
    scores: np.ndarray
    final_labels: np.ndarray
    true_labels: np.ndarray | None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        scores = np.ascontiguousarray(self.scores, dtype=np.float64)
        if scores.ndim != 1:
            raise ValueError("scores must be a 1-D array")
        if not np.all(np.isfinite(scores)):
            raise ValueError("scores must be finite")
        scores.flags.writeable = False
        object.__setattr__(self, "scores", scores)

    @property
    def n_examples(self) -> int:
        return self.scores.shape[0]

    @property
    def method_id(self) -> str:
        if self.method in SCORE_METHODS:
            return method_id(self.method, self.params)
        # re-ingested sets are named by their file stem, which is already an id
        return self.method

    def correctness(self) -> np.ndarray:
        if self.true_labels is None:
            raise ValueError("scored set carries no true labels")
        return np.asarray(self.final_labels) == np.asarray(self.true_labels)


def _fmt_param(value) -> str:
    if isinstance(value, float):
        return f"{value:g}"
    return str(value)


def method_id(method: str, params: dict) -> str:
    """Stable, filename-safe identifier like ``avg_k0.05`` or
    ``var_confidence_kw1``."""
    if method in ("min", "avg"):
        parts = [method, f"k{_fmt_param(params.get('k', DEFAULT_K))}"]
        e_model = params.get("e_model")
        if isinstance(e_model, EtModel):
            e_model = e_model.describe()
        if e_model is not None and e_model != "zero":
            parts.append(f"eadj_{e_model}")
        return "_".join(parts)
    if method == "jump":
        parts = [method, f"k{_fmt_param(params.get('k', DEFAULT_K))}"]
        if params.get("normalized"):
            parts.append("norm")
        return "_".join(parts)
    if method == "var":
        metric = params.get("metric", "confidence")
        return f"var_{metric}_kw{_fmt_param(params.get('k_w', 1.0))}"
    if method == "softmax_response":
        return "softmax_response"
    raise ValueError(f"unknown scoring method {method!r}, expected one of {SCORE_METHODS}")


def score_trace(
    trace: PredictionTrace,
    method: str,
    *,
    k: float = DEFAULT_K,
    e_model: EtModel | None = None,
    metric: str = "confidence",
    k_w: float = 1.0,
    normalized: bool = False,
) -> ScoredSet:
    """Apply one scoring method to every example of a trace.

    Each output entry equals the scalar operation applied to that example's
    checkpoint column; no vectorized shortcut is taken, so per-example and
    whole-trace results agree bit for bit.
    """
    t_count = trace.n_checkpoints
    n = trace.n_examples
    if method not in SCORE_METHODS:
        raise ValueError(f"unknown scoring method {method!r}, expected one of {SCORE_METHODS}")
    needs_probs = method in ("var", "softmax_response")
    if needs_probs and trace.probabilities is None:
        raise ValueError(f"method {method!r} requires a trace with recorded probabilities")

    scores = np.empty(n, dtype=np.float64)
    params: dict = {}
    if method in ("min", "avg", "jump"):
        v = weight_schedule(t_count, k)
        params["k"] = k
    if method in ("min", "avg"):
        eff_e = e_model if e_model is not None else EtModel.zero()
        params["e_model"] = eff_e.describe()
        disagreements = disagreement_matrix(trace)
        fn = score_min if method == "min" else score_avg
        for i in range(n):
            scores[i] = fn(disagreements[:, i], v, eff_e)
    elif method == "jump":
        params["normalized"] = normalized
        for i in range(n):
            scores[i] = score_jump(trace.labels[:, i], v, normalized=normalized)
    elif method == "var":
        params["metric"] = metric
        params["k_w"] = k_w
        w = variance_weights(t_count, k_w)
        assert trace.probabilities is not None
        for i in range(n):
            z = np.array(
                [continuous_metric(trace.probabilities[t, i], metric) for t in range(t_count)]
            )
            scores[i] = score_var(z, w)
    else:
        assert trace.probabilities is not None
        for i in range(n):
            scores[i] = softmax_response(trace.probabilities[-1, i])

    return ScoredSet(
        method=method,
        params=params,
        scores=scores,
        final_labels=trace.final_labels.copy(),
        true_labels=None if trace.true_labels is None else trace.true_labels.copy(),
        provenance=trace.provenance(),
    )


def write_scored_csv(scored: ScoredSet, destination: str | Path | TextIO) -> None:
    """Columns: example, score, final_label, and true_label when known."""
    if hasattr(destination, "write"):
        _write_scored_stream(scored, destination)  # type: ignore[arg-type]
        return
    with open(destination, "w", newline="") as fh:
        _write_scored_stream(scored, fh)


def _write_scored_stream(scored: ScoredSet, fh: TextIO) -> None:
    writer = csv.writer(fh)
    has_truth = scored.true_labels is not None
    writer.writerow(["example", "score", "final_label"] + (["true_label"] if has_truth else []))
    for i in range(scored.n_examples):
        row = [i, repr(float(scored.scores[i])), int(scored.final_labels[i])]
        if has_truth:
            row.append(int(scored.true_labels[i]))  # type: ignore[index]
        writer.writerow(row)


def read_scored_csv(path: str | Path, method: str | None = None) -> ScoredSet:
    """Re-ingest a scored-set CSV. The method id defaults to the file stem."""
    path = Path(path)
    scores, finals, truths = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        head = next(reader, None)
        if head is None or head[:3] != ["example", "score", "final_label"]:
            raise ValueError(f"{path}: not a scored-set CSV")
        has_truth = len(head) > 3 and head[3] == "true_label"
        for row in reader:
            scores.append(float(row[1]))
            finals.append(int(row[2]))
            if has_truth:
                truths.append(int(row[3]))
    if not scores:
        raise ValueError(f"{path}: no score rows")
    name = method if method is not None else path.stem
    return ScoredSet(
        method=name,
        params={},
        scores=np.asarray(scores),
        final_labels=np.asarray(finals, dtype=np.int64),
        true_labels=np.asarray(truths, dtype=np.int64) if truths else None,
        provenance={"source": str(path)},
    )


def write_scored_json(scored: ScoredSet, destination: str | Path) -> None:
    payload = {
        "method": scored.method,
        "method_id": scored.method_id,
        "params": {key: val for key, val in scored.params.items()},
        "provenance": scored.provenance,
        "scores": [float(s) for s in scored.scores],
        "final_labels": [int(x) for x in scored.final_labels],
        "true_labels": None
        if scored.true_labels is None
        else [int(x) for x in scored.true_labels],
    }
    Path(destination).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
