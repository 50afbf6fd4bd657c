"""Prediction traces: per-checkpoint predicted labels for a fixed evaluation set.

A trace is the only artifact downstream code consumes; models are never kept
around. Traces are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Sequence, TextIO

import numpy as np

MAGIC = b"NNTDTRC1"
_MAGIC_STEM = MAGIC[:7]
_PROB_ROW_SUM_TOL = 1e-6

__all__ = [
    "MAGIC",
    "PredictionTrace",
    "TraceFormatError",
    "BadMagicError",
    "UnsupportedVersionError",
    "TruncatedTraceError",
    "HeaderPayloadMismatchError",
    "disagreement_vector",
    "disagreement_matrix",
    "read_trace",
    "write_trace",
    "subsample_checkpoints",
    "evenly_spaced_checkpoints",
    "export_trace_csv",
    "read_trace_csv",
]


class TraceFormatError(ValueError):
    """Base error for malformed trace files."""


class BadMagicError(TraceFormatError):
    """File does not start with the trace magic bytes."""


class UnsupportedVersionError(TraceFormatError):
    """Known magic stem but an unknown format version byte."""


class TruncatedTraceError(TraceFormatError):
    """File ends before the payload announced by the header."""


class HeaderPayloadMismatchError(TraceFormatError):
    """Header dimensions do not agree with the payload contents."""


@dataclass(frozen=True)
class PredictionTrace:
    """T checkpoints x N examples of predicted labels, plus optional extras.

    The last checkpoint row (index T-1) is the final model; every score in
    this package is defined relative to it. Labels are stored per checkpoint
    even when probabilities are present so label-only pipelines never depend
    on float rounding.

    Fields:
        labels: (T, N) uint16 class indices in [0, n_classes).
        checkpoint_steps: (T,) strictly increasing optimizer-step indices.
        n_classes: number of classes C >= 2 (and <= 65535, labels are uint16).
        probabilities: optional (T, N, C) float32; rows sum to 1 within 1e-6
            and argmax agrees with ``labels``.
        true_labels: optional (N,) uint16 ground truth, needed only for
            evaluation and calibration, never for scoring.
        seed: RNG seed of the producing run (provenance).
    """

    labels: np.ndarray
    checkpoint_steps: np.ndarray
    n_classes: int
    probabilities: np.ndarray | None = None
    true_labels: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        labels = np.ascontiguousarray(self.labels, dtype=np.uint16)
        steps = np.ascontiguousarray(self.checkpoint_steps, dtype=np.int64)
        if labels.ndim != 2:
            raise ValueError(f"labels must be 2-D (T, N), got shape {labels.shape}")
        t, n = labels.shape
        if t < 1 or n < 1:
            raise ValueError("trace needs at least one checkpoint and one example")
        if not (2 <= self.n_classes <= np.iinfo(np.uint16).max):
            raise ValueError(f"n_classes must be in [2, 65535], got {self.n_classes}")
        if labels.max() >= self.n_classes:
            raise ValueError("label out of range for n_classes")
        if steps.shape != (t,):
            raise ValueError("checkpoint_steps length must equal the checkpoint count")
        if steps.min() < 0 or (t > 1 and np.any(np.diff(steps) <= 0)):
            raise ValueError("checkpoint_steps must be non-negative and strictly increasing")

        probs = self.probabilities
        if probs is not None:
            probs = np.ascontiguousarray(probs, dtype=np.float32)
            if probs.shape != (t, n, self.n_classes):
                raise ValueError(
                    f"probabilities shape {probs.shape} does not match "
                    f"(T={t}, N={n}, C={self.n_classes})"
                )
            if probs.min() < 0.0 or probs.max() > 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
            sums = probs.sum(axis=2, dtype=np.float64)
            if np.max(np.abs(sums - 1.0)) > _PROB_ROW_SUM_TOL:
                raise ValueError("probability rows must sum to 1 within 1e-6")
            if np.any(probs.argmax(axis=2) != labels):
                raise ValueError("argmax of probabilities disagrees with labels")
            probs.flags.writeable = False

        truth = self.true_labels
        if truth is not None:
            truth = np.ascontiguousarray(truth, dtype=np.uint16)
            if truth.shape != (n,):
                raise ValueError("true_labels length must equal the example count")
            if truth.max() >= self.n_classes:
                raise ValueError("true label out of range for n_classes")
            truth.flags.writeable = False

        labels.flags.writeable = False
        steps.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "checkpoint_steps", steps)
        object.__setattr__(self, "probabilities", probs)
        object.__setattr__(self, "true_labels", truth)
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def n_checkpoints(self) -> int:
        return self.labels.shape[0]

    @property
    def n_examples(self) -> int:
        return self.labels.shape[1]

    @property
    def final_labels(self) -> np.ndarray:
        """Predictions of the final model (checkpoint index T-1)."""
        return self.labels[-1]

    def provenance(self) -> dict:
        return {
            "seed": self.seed,
            "n_checkpoints": self.n_checkpoints,
            "n_examples": self.n_examples,
            "n_classes": self.n_classes,
        }

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PredictionTrace):
            return NotImplemented
        same_optional = (
            (self.probabilities is None) == (other.probabilities is None)
            and (self.true_labels is None) == (other.true_labels is None)
        )
        if not same_optional:
            return False
        return (
            self.n_classes == other.n_classes
            and self.seed == other.seed
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.checkpoint_steps, other.checkpoint_steps)
            and (self.probabilities is None or np.array_equal(self.probabilities, other.probabilities))
            and (self.true_labels is None or np.array_equal(self.true_labels, other.true_labels))
        )


def disagreement_vector(trace: PredictionTrace, example: int) -> np.ndarray:
    """Binary vector a with a[t] = 1 iff checkpoint t predicts a different
    label than the final model for this example. The last entry is always 0.
    """
    if not 0 <= example < trace.n_examples:
        raise IndexError(f"example index {example} out of range [0, {trace.n_examples})")
    column = trace.labels[:, example]
    return (column != column[-1]).astype(np.uint8)


def disagreement_matrix(trace: PredictionTrace) -> np.ndarray:
    """(T, N) binary matrix of disagreements with the final prediction."""
    return (trace.labels != trace.final_labels[np.newaxis, :]).astype(np.uint8)


def _header_dict(trace: PredictionTrace) -> dict:
    return {
        "n_checkpoints": trace.n_checkpoints,
        "n_examples": trace.n_examples,
        "n_classes": trace.n_classes,
        "checkpoint_steps": [int(s) for s in trace.checkpoint_steps],
        "has_probabilities": trace.probabilities is not None,
        "has_true_labels": trace.true_labels is not None,
        "seed": trace.seed,
    }


def write_trace(trace: PredictionTrace, destination: str | Path | BinaryIO) -> None:
    """Serialize a trace.

    Layout: 8-byte magic, uint32-LE header length, UTF-8 JSON header, then
    dense little-endian payloads in order: labels (uint16), probabilities
    (float32, if present), true labels (uint16, if present). The header JSON
    uses sorted keys and no whitespace so identical traces produce identical
    bytes on every platform.
    """
    if hasattr(destination, "write"):
        _write_stream(trace, destination)  # type: ignore[arg-type]
        return
    with open(destination, "wb") as fh:
        _write_stream(trace, fh)


def _write_stream(trace: PredictionTrace, fh: BinaryIO) -> None:
    header = json.dumps(_header_dict(trace), sort_keys=True, separators=(",", ":")).encode("utf-8")
    fh.write(MAGIC)
    fh.write(struct.pack("<I", len(header)))
    fh.write(header)
    fh.write(trace.labels.astype("<u2", copy=False).tobytes())
    if trace.probabilities is not None:
        fh.write(trace.probabilities.astype("<f4", copy=False).tobytes())
    if trace.true_labels is not None:
        fh.write(trace.true_labels.astype("<u2", copy=False).tobytes())


def read_trace(source: str | Path | BinaryIO) -> PredictionTrace:
    """Read a trace written by :func:`write_trace`. Inverse up to bit identity."""
    if hasattr(source, "read"):
        return _read_stream(source)  # type: ignore[arg-type]
    with open(source, "rb") as fh:
        return _read_stream(fh)


def _read_exact(fh: BinaryIO, size: int, what: str) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise TruncatedTraceError(f"trace file truncated while reading {what}")
    return data


def _read_stream(fh: BinaryIO) -> PredictionTrace:
    magic = fh.read(len(MAGIC))
    if len(magic) < len(MAGIC) or magic[:7] != _MAGIC_STEM:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if magic != MAGIC:
        raise UnsupportedVersionError(f"unsupported trace format version byte {magic[7:]!r}")

    (header_len,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
    try:
        header = json.loads(_read_exact(fh, header_len, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TraceFormatError(f"unreadable trace header: {exc}") from exc

    try:
        t = int(header["n_checkpoints"])
        n = int(header["n_examples"])
        c = int(header["n_classes"])
        steps = np.asarray(header["checkpoint_steps"], dtype=np.int64)
        has_probs = bool(header["has_probabilities"])
        has_truth = bool(header["has_true_labels"])
        seed = int(header["seed"])
    except (KeyError, TypeError, ValueError) as exc:
        raise TraceFormatError(f"trace header missing or malformed field: {exc}") from exc
    if steps.shape != (t,):
        raise HeaderPayloadMismatchError(
            f"header lists {steps.shape[0]} checkpoint steps but n_checkpoints={t}"
        )

    labels = np.frombuffer(_read_exact(fh, t * n * 2, "labels"), dtype="<u2").reshape(t, n)
    probs = None
    if has_probs:
        raw = _read_exact(fh, t * n * c * 4, "probabilities")
        probs = np.frombuffer(raw, dtype="<f4").reshape(t, n, c)
    truth = None
    if has_truth:
        truth = np.frombuffer(_read_exact(fh, n * 2, "true labels"), dtype="<u2")
    trailing = fh.read(1)
    if trailing:
        raise HeaderPayloadMismatchError("payload longer than the header announces")

    try:
        return PredictionTrace(
            labels=labels,
            checkpoint_steps=steps,
            n_classes=c,
            probabilities=probs,
            true_labels=truth,
            seed=seed,
        )
    except ValueError as exc:
        raise HeaderPayloadMismatchError(str(exc)) from exc


def subsample_checkpoints(trace: PredictionTrace, keep: Sequence[int] | np.ndarray) -> PredictionTrace:
    """Restrict a trace to the given checkpoint indices.

    ``keep`` must be strictly increasing and end with T-1: scores are defined
    relative to the final prediction, so the final model must be retained.
    """
    keep_arr = np.asarray(keep, dtype=np.int64)
    if keep_arr.size == 0:
        raise ValueError("keep must be nonempty")
    if np.any(keep_arr < 0) or np.any(keep_arr >= trace.n_checkpoints):
        raise ValueError("keep contains out-of-range checkpoint indices")
    if keep_arr.size > 1 and np.any(np.diff(keep_arr) <= 0):
        raise ValueError("keep must be strictly increasing")
    if keep_arr[-1] != trace.n_checkpoints - 1:
        raise ValueError("keep must retain the final checkpoint index")
    return PredictionTrace(
        labels=trace.labels[keep_arr],
        checkpoint_steps=trace.checkpoint_steps[keep_arr],
        n_classes=trace.n_classes,
        probabilities=None if trace.probabilities is None else trace.probabilities[keep_arr],
        true_labels=trace.true_labels,
        seed=trace.seed,
    )


def evenly_spaced_checkpoints(n_checkpoints: int, count: int) -> np.ndarray:
    """``count`` indices spread evenly over [0, T-1], always including T-1.

    Used for checkpoint-resolution studies. Requires 1 <= count <= T.
    """
    if not 1 <= count <= n_checkpoints:
        raise ValueError(f"count must be in [1, {n_checkpoints}], got {count}")
    if count == 1:
        return np.array([n_checkpoints - 1], dtype=np.int64)
    return np.round(np.linspace(0, n_checkpoints - 1, count)).astype(np.int64)


def export_trace_csv(trace: PredictionTrace, destination: str | Path | TextIO) -> None:
    """One row per (checkpoint, example): checkpoint index, optimizer step,
    example index, predicted label, and probability columns when present.
    """
    if hasattr(destination, "write"):
        _export_csv_stream(trace, destination)  # type: ignore[arg-type]
        return
    with open(destination, "w", newline="") as fh:
        _export_csv_stream(trace, fh)


def _export_csv_stream(trace: PredictionTrace, fh: TextIO) -> None:
    writer = csv.writer(fh)
    head = ["checkpoint", "step", "example", "label"]
    if trace.probabilities is not None:
        head += [f"p{c}" for c in range(trace.n_classes)]
    writer.writerow(head)
    for t in range(trace.n_checkpoints):
        step = int(trace.checkpoint_steps[t])
        for i in range(trace.n_examples):
            row: list = [t, step, i, int(trace.labels[t, i])]
            if trace.probabilities is not None:
                row += [repr(float(p)) for p in trace.probabilities[t, i]]
            writer.writerow(row)


def read_trace_csv(source: str | Path | TextIO) -> PredictionTrace:
    """Rebuild a trace from :func:`export_trace_csv` output.

    Seed and true labels are not part of the CSV; the result carries seed 0
    and no ground truth.
    """
    if hasattr(source, "read"):
        return _read_csv_stream(source)  # type: ignore[arg-type]
    with open(source, newline="") as fh:
        return _read_csv_stream(fh)


def _read_csv_stream(fh: TextIO) -> PredictionTrace:
    reader = csv.reader(fh)
    head = next(reader, None)
    if head is None or head[:4] != ["checkpoint", "step", "example", "label"]:
        raise TraceFormatError("not a trace CSV: unexpected header row")
    prob_cols = len(head) - 4
    cells: dict[tuple[int, int], tuple[int, int, list[float]]] = {}
    for row in reader:
        t, step, i, label = int(row[0]), int(row[1]), int(row[2]), int(row[3])
        probs = [float(x) for x in row[4:]] if prob_cols else []
        cells[(t, i)] = (step, label, probs)
    if not cells:
        raise TraceFormatError("trace CSV has no data rows")
    t_count = max(t for t, _ in cells) + 1
    n_count = max(i for _, i in cells) + 1
    if len(cells) != t_count * n_count:
        raise HeaderPayloadMismatchError("trace CSV is missing (checkpoint, example) rows")
    labels = np.zeros((t_count, n_count), dtype=np.uint16)
    steps = np.zeros(t_count, dtype=np.int64)
    probs_arr = np.zeros((t_count, n_count, prob_cols), dtype=np.float32) if prob_cols else None
    for (t, i), (step, label, probs) in cells.items():
        labels[t, i] = label
        steps[t] = step
        if probs_arr is not None:
            probs_arr[t, i] = probs
    n_classes = prob_cols if prob_cols else int(labels.max()) + 1
    return PredictionTrace(
        labels=labels,
        checkpoint_steps=steps,
        n_classes=max(n_classes, 2),
        probabilities=probs_arr,
        true_labels=None,
        seed=0,
    )
