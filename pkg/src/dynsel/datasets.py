"""Dataset ingestion: IDX and CSV readers plus a seeded Gaussian-blob generator."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

__all__ = [
    "Dataset",
    "DatasetFormatError",
    "load_idx",
    "load_csv",
    "load_dataset",
    "synth_blobs",
    "split_dataset",
    "concat_datasets",
]


class DatasetFormatError(ValueError):
    """Raised for unreadable or inconsistent dataset files."""


@dataclass(frozen=True)
class Dataset:
    """N examples of d float32 features with integer class targets.

    ``noise_mask`` is provenance from :func:`synth_blobs`: True where the
    target was resampled away from its generating class.
    """

    features: np.ndarray
    targets: np.ndarray
    n_classes: int
    noise_mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        feats = np.ascontiguousarray(self.features, dtype=np.float32)
        targets = np.ascontiguousarray(self.targets, dtype=np.int64)
        if feats.ndim != 2:
            raise ValueError(f"features must be 2-D (N, d), got shape {feats.shape}")
        if targets.shape != (feats.shape[0],):
            raise ValueError("targets length must match the number of examples")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features contain NaN or Inf")
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if targets.size and (targets.min() < 0 or targets.max() >= self.n_classes):
            raise ValueError("target out of range for n_classes")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "targets", targets)

    @property
    def n_examples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(
            features=self.features[indices],
            targets=self.targets[indices],
            n_classes=self.n_classes,
            noise_mask=None if self.noise_mask is None else self.noise_mask[indices],
        )


def _read_idx_header(fh, path: Path, expected_magic: int, n_dims: int) -> tuple[int, ...]:
    raw = fh.read(4 * (1 + n_dims))
    if len(raw) != 4 * (1 + n_dims):
        raise DatasetFormatError(f"{path}: truncated IDX header")
    values = struct.unpack(f">{1 + n_dims}i", raw)
    if values[0] != expected_magic:
        raise DatasetFormatError(
            f"{path}: bad IDX magic 0x{values[0]:08x}, expected 0x{expected_magic:08x}"
        )
    return values[1:]


def load_idx(images_path: str | Path, labels_path: str | Path) -> Dataset:
    """Load an IDX image/label file pair (big-endian, MNIST-style layout).

    Images are flattened to (N, rows*cols) and scaled from [0, 255] to [0, 1].
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    with open(images_path, "rb") as fh:
        count, rows, cols = _read_idx_header(fh, images_path, IDX_IMAGE_MAGIC, 3)
        pixels = np.frombuffer(fh.read(), dtype=np.uint8)
    if pixels.size != count * rows * cols:
        raise DatasetFormatError(f"{images_path}: pixel payload does not match header dimensions")
    with open(labels_path, "rb") as fh:
        (label_count,) = _read_idx_header(fh, labels_path, IDX_LABEL_MAGIC, 1)
        labels = np.frombuffer(fh.read(), dtype=np.uint8)
    if labels.size != label_count:
        raise DatasetFormatError(f"{labels_path}: label payload does not match header count")
    if label_count != count:
        raise DatasetFormatError(
            f"image/label count mismatch: {count} images vs {label_count} labels"
        )
    features = pixels.reshape(count, rows * cols).astype(np.float32) / 255.0
    return Dataset(features=features, targets=labels.astype(np.int64),
                   n_classes=int(labels.max()) + 1 if labels.size else 2)


def load_csv(path: str | Path) -> Dataset:
    """Load a CSV of one example per row, last column an integer class label."""
    path = Path(path)
    features: list[list[float]] = []
    targets: list[int] = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) < 2:
                raise DatasetFormatError(f"{path}:{lineno}: need at least one feature and a label")
            try:
                feats = [float(x) for x in row[:-1]]
            except ValueError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: non-numeric feature: {exc}") from exc
            label_raw = row[-1].strip()
            try:
                label_f = float(label_raw)
            except ValueError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: non-integer label {label_raw!r}") from exc
            if label_f != int(label_f):
                raise DatasetFormatError(f"{path}:{lineno}: non-integer label {label_raw!r}")
            features.append(feats)
            targets.append(int(label_f))
    if not features:
        raise DatasetFormatError(f"{path}: no data rows")
    widths = {len(f) for f in features}
    if len(widths) != 1:
        raise DatasetFormatError(f"{path}: inconsistent feature counts per row: {sorted(widths)}")
    targets_arr = np.asarray(targets, dtype=np.int64)
    return Dataset(
        features=np.asarray(features, dtype=np.float32),
        targets=targets_arr,
        n_classes=max(int(targets_arr.max()) + 1, 2),
    )


def load_dataset(fmt: str, **paths: str | Path) -> Dataset:
    """Dispatch on dataset format: ``idx`` (images=..., labels=...) or ``csv`` (path=...)."""
    if fmt == "idx":
        return load_idx(paths["images"], paths["labels"])
    if fmt == "csv":
        return load_csv(paths["path"])
    raise DatasetFormatError(f"unknown dataset format {fmt!r}")


def _cholesky_factor(cov, d: int) -> np.ndarray:
    cov_arr = np.asarray(cov, dtype=np.float64)
    if cov_arr.ndim == 0:
        if cov_arr <= 0:
            raise ValueError(f"variance must be positive, got {float(cov_arr)}")
        return np.sqrt(float(cov_arr)) * np.eye(d)
    try:
        return np.linalg.cholesky(cov_arr)
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance matrix is not positive definite") from exc


def _per_class_covariances(covariances, k: int, d: int) -> list:
    cov_arr = np.asarray(covariances, dtype=np.float64)
    if cov_arr.ndim == 0:
        return [float(cov_arr)] * k
    if cov_arr.ndim == 1:
        if cov_arr.shape[0] != k:
            raise ValueError(f"per-class variance list needs {k} entries, got {cov_arr.shape[0]}")
        return [float(x) for x in cov_arr]
    if cov_arr.ndim == 2:
        if cov_arr.shape != (d, d):
            raise ValueError(f"shared covariance matrix must be {d}x{d}, got {cov_arr.shape}")
        return [cov_arr] * k
    if cov_arr.ndim == 3:
        if cov_arr.shape != (k, d, d):
            raise ValueError(f"per-class covariances must be ({k}, {d}, {d}), got {cov_arr.shape}")
        return list(cov_arr)
    raise ValueError("covariances must be a scalar, per-class scalars, or covariance matrices")


def synth_blobs(
    centers: Sequence[Sequence[float]],
    covariances,
    counts: Sequence[int],
    label_noise_rate: float = 0.0,
    seed: int = 0,
) -> Dataset:
    """Gaussian blob dataset, one blob per class, with optional label noise.

    ``covariances`` may be one scalar variance shared by all classes, a
    per-class list of scalar variances, one shared (d, d) covariance matrix,
    or a (k, d, d) stack of per-class matrices. Label noise resamples a
    ``label_noise_rate`` fraction of targets uniformly among the other
    classes; the flip mask comes from thresholding per-example uniforms, so
    the whole dataset is a pure function of the seed.
    """
    centers_arr = np.asarray(centers, dtype=np.float64)
    if centers_arr.ndim != 2 or centers_arr.shape[0] < 2:
        raise ValueError("need at least two class centers of equal dimension")
    k, d = centers_arr.shape
    if len(counts) != k:
        raise ValueError("counts must give one entry per class")
    if any(int(c) < 1 for c in counts):
        raise ValueError("per-class counts must be positive")
    if not 0.0 <= label_noise_rate < 1.0:
        raise ValueError("label_noise_rate must lie in [0, 1)")
    per_class_cov = _per_class_covariances(covariances, k, d)

    rng = np.random.default_rng(seed)
    feature_blocks = []
    target_blocks = []
    for cls in range(k):
        n_cls = int(counts[cls])
        factor = _cholesky_factor(per_class_cov[cls], d)
        z = rng.standard_normal((n_cls, d))
        feature_blocks.append(centers_arr[cls] + z @ factor.T)
        target_blocks.append(np.full(n_cls, cls, dtype=np.int64))
    features = np.concatenate(feature_blocks)
    targets = np.concatenate(target_blocks)

    n = targets.size
    mask = rng.random(n) < label_noise_rate
    offsets = rng.integers(1, k, size=n)
    targets = np.where(mask, (targets + offsets) % k, targets)
    return Dataset(
        features=features.astype(np.float32),
        targets=targets,
        n_classes=k,
        noise_mask=mask,
    )


def concat_datasets(parts: Sequence[Dataset]) -> Dataset:
    """Stack datasets in order; class counts must agree."""
    if not parts:
        raise ValueError("need at least one dataset to concatenate")
    if len({p.n_classes for p in parts}) != 1:
        raise ValueError("datasets disagree on class count")
    if len({p.n_features for p in parts}) != 1:
        raise ValueError("datasets disagree on feature dimension")
    masks = [p.noise_mask for p in parts]
    return Dataset(
        features=np.concatenate([p.features for p in parts]),
        targets=np.concatenate([p.targets for p in parts]),
        n_classes=parts[0].n_classes,
        noise_mask=np.concatenate(masks) if all(m is not None for m in masks) else None,  # type: ignore[arg-type]
    )


def split_dataset(dataset: Dataset, fractions: dict[str, float], seed: int) -> dict[str, Dataset]:
    """Shuffle once and partition into named splits by fraction.

    Fractions must be positive and sum to at most 1; leftover examples are
    dropped. The permutation stream is [seed, 1000003] so it never collides
    with the trainer's per-epoch shuffle streams.
    """
    if not fractions:
        raise ValueError("need at least one split fraction")
    if any(f <= 0 for f in fractions.values()):
        raise ValueError("split fractions must be positive")
    if sum(fractions.values()) > 1.0 + 1e-9:
        raise ValueError("split fractions must sum to at most 1")
    perm = np.random.default_rng([seed, 1_000_003]).permutation(dataset.n_examples)
    splits: dict[str, Dataset] = {}
    start = 0
    for name, frac in fractions.items():
        size = int(round(frac * dataset.n_examples))
        size = min(size, dataset.n_examples - start)
        if size == 0:
            raise ValueError(f"split {name!r} would be empty")
        splits[name] = dataset.subset(perm[start : start + size])
        start += size
    return splits
