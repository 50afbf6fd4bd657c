"""Experiment configuration: one JSON file drives the whole pipeline.

Every random choice in a run flows from the explicit seeds in here; there is
no hidden global RNG, so a config plus a seed replays exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .datasets import Dataset, load_csv, load_idx, synth_blobs
from .nn import ACTIVATIONS, OPTIMIZERS, TrainConfig
from .scores import CONTINUOUS_METRICS, SCORE_METHODS

CALIBRATION_MODES = ("held_out", "paper_protocol")
DEFAULT_TARGET_ERRORS = (0.02, 0.01, 0.005)
DEFAULT_TARGET_COVERAGES = (1.0, 0.95, 0.9)

__all__ = [
    "CALIBRATION_MODES",
    "ConfigError",
    "DatasetSpec",
    "CalibrationSpec",
    "SweepSpec",
    "ExperimentConfig",
    "load_config",
]


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass(frozen=True)
class DatasetSpec:
    """Where the data comes from: synthetic blobs or an idx/csv file."""

    kind: str
    params: dict

    def load(self, seed: int) -> Dataset:
        if self.kind == "synthetic":
            return synth_blobs(
                centers=self.params["centers"],
                covariances=self.params.get("covariances", 1.0),
                counts=self.params["counts"],
                label_noise_rate=self.params.get("label_noise_rate", 0.0),
                seed=seed,
            )
        if self.kind == "idx":
            return load_idx(self.params["images"], self.params["labels"])
        return load_csv(self.params["path"])


@dataclass(frozen=True)
class CalibrationSpec:
    mode: str = "paper_protocol"
    target_errors: tuple[float, ...] = DEFAULT_TARGET_ERRORS
    target_coverages: tuple[float, ...] = DEFAULT_TARGET_COVERAGES


@dataclass(frozen=True)
class SweepSpec:
    k_values: tuple[float, ...] = (0.01, 0.02, 0.05, 0.1, 0.25, 0.5, 1.0)
    concave_k_values: tuple[float, ...] = (1.0, 2.0, 4.0)
    checkpoint_counts: tuple[int, ...] = (10, 25, 50, 100)
    seeds: tuple[int, ...] = ()


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    output_dir: str
    dataset: DatasetSpec
    train: TrainConfig
    score_methods: tuple[dict, ...]
    calibration: CalibrationSpec = field(default_factory=CalibrationSpec)
    splits: dict[str, float] = field(default_factory=dict)
    sweep: SweepSpec = field(default_factory=SweepSpec)

    @property
    def sweep_seeds(self) -> tuple[int, ...]:
        return self.sweep.seeds if self.sweep.seeds else (self.seed,)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "dataset": {"kind": self.dataset.kind, **self.dataset.params},
            "train": {
                "layer_sizes": list(self.train.layer_sizes),
                "activation": self.train.activation,
                "optimizer": self.train.optimizer,
                "learning_rate": self.train.learning_rate,
                "momentum": self.train.momentum,
                "weight_decay": self.train.weight_decay,
                "batch_size": self.train.batch_size,
                "epochs": self.train.epochs,
                "checkpoint_every": self.train.checkpoint_every,
                "record_probabilities": self.train.record_probabilities,
                "lr_milestones": list(self.train.lr_milestones),
                "lr_decay": self.train.lr_decay,
            },
            "scores": list(self.score_methods),
            "calibration": {
                "mode": self.calibration.mode,
                "target_errors": list(self.calibration.target_errors),
                "target_coverages": list(self.calibration.target_coverages),
            },
            "splits": dict(self.splits),
            "sweep": {
                "k_values": list(self.sweep.k_values),
                "concave_k_values": list(self.sweep.concave_k_values),
                "checkpoint_counts": list(self.sweep.checkpoint_counts),
                "seeds": list(self.sweep.seeds),
            },
        }


def _require(raw: dict, key: str, where: str):
    if key not in raw:
        raise ConfigError(f"{where}: missing required field {key!r}")
    return raw[key]


def _parse_dataset(raw: dict) -> DatasetSpec:
    kind = _require(raw, "kind", "dataset")
    params = {k: v for k, v in raw.items() if k != "kind"}
    if kind == "synthetic":
        _require(params, "centers", "dataset")
        _require(params, "counts", "dataset")
        rate = params.get("label_noise_rate", 0.0)
        if not 0.0 <= float(rate) < 1.0:
            raise ConfigError(f"dataset: label_noise_rate must lie in [0, 1), got {rate}")
    elif kind == "idx":
        for key in ("images", "labels"):
            path = Path(_require(params, key, "dataset"))
            if not path.exists():
                raise ConfigError(f"dataset: {key} file does not exist: {path}")
    elif kind == "csv":
        path = Path(_require(params, "path", "dataset"))
        if not path.exists():
            raise ConfigError(f"dataset: file does not exist: {path}")
    else:
        raise ConfigError(f"dataset: unknown kind {kind!r}")
    return DatasetSpec(kind=kind, params=params)


def _parse_train(raw: dict, seed: int) -> TrainConfig:
    known = {
        "layer_sizes", "activation", "optimizer", "learning_rate", "momentum",
        "weight_decay", "batch_size", "epochs", "checkpoint_every",
        "record_probabilities", "lr_milestones", "lr_decay",
    }
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"train: unknown fields {sorted(unknown)}")
    if "layer_sizes" not in raw:
        raise ConfigError("train: missing required field 'layer_sizes'")
    if raw.get("activation", "relu") not in ACTIVATIONS:
        raise ConfigError(f"train: activation must be one of {ACTIVATIONS}")
    if raw.get("optimizer", "adam") not in OPTIMIZERS:
        raise ConfigError(f"train: optimizer must be one of {OPTIMIZERS}")
    try:
        return TrainConfig(
            layer_sizes=tuple(raw["layer_sizes"]),
            activation=raw.get("activation", "relu"),
            optimizer=raw.get("optimizer", "adam"),
            learning_rate=float(raw.get("learning_rate", 1e-3)),
            momentum=float(raw.get("momentum", 0.9)),
            weight_decay=float(raw.get("weight_decay", 0.0)),
            batch_size=int(raw.get("batch_size", 32)),
            epochs=int(raw.get("epochs", 10)),
            checkpoint_every=int(raw.get("checkpoint_every", 50)),
            seed=seed,
            record_probabilities=bool(raw.get("record_probabilities", True)),
            lr_milestones=tuple(raw.get("lr_milestones", ())),
            lr_decay=float(raw.get("lr_decay", 1.0)),
        )
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from exc


def _parse_methods(raw_list) -> tuple[dict, ...]:
    if not isinstance(raw_list, list) or not raw_list:
        raise ConfigError("scores: need a nonempty list of method specs")
    methods = []
    for spec in raw_list:
        method = _require(spec, "method", "scores")
        if method not in SCORE_METHODS:
            raise ConfigError(f"scores: unknown method {method!r}, expected one of {SCORE_METHODS}")
        if method == "var" and spec.get("metric", "confidence") not in CONTINUOUS_METRICS:
            raise ConfigError(f"scores: unknown continuous metric {spec.get('metric')!r}")
        e_model = spec.get("e_model")
        if e_model is not None:
            variant = e_model.get("variant") if isinstance(e_model, dict) else None
            if variant not in ("zero", "empirical", "smooth"):
                raise ConfigError("scores: e_model.variant must be zero, empirical, or smooth")
            if variant == "smooth" and float(e_model.get("exponent", 0)) <= 0:
                raise ConfigError("scores: smooth e_model needs a positive exponent")
        methods.append(dict(spec))
    return tuple(methods)


def _parse_calibration(raw: dict) -> CalibrationSpec:
    mode = raw.get("mode", "paper_protocol")
    if mode not in CALIBRATION_MODES:
        raise ConfigError(f"calibration: mode must be one of {CALIBRATION_MODES}")
    errors = tuple(float(e) for e in raw.get("target_errors", DEFAULT_TARGET_ERRORS))
    coverages = tuple(float(c) for c in raw.get("target_coverages", DEFAULT_TARGET_COVERAGES))
    if not errors or not coverages:
        raise ConfigError("calibration: target lists must be nonempty")
    if any(not 0.0 <= e < 1.0 for e in errors):
        raise ConfigError("calibration: target errors must lie in [0, 1)")
    if any(not 0.0 < c <= 1.0 for c in coverages):
        raise ConfigError("calibration: target coverages must lie in (0, 1]")
    return CalibrationSpec(mode=mode, target_errors=errors, target_coverages=coverages)


def _parse_splits(raw: dict, mode: str) -> dict[str, float]:
    unknown = set(raw) - {"train", "calibration", "eval"}
    if unknown:
        raise ConfigError(f"splits: unknown split names {sorted(unknown)}")
    for key in ("train", "eval"):
        if key not in raw:
            raise ConfigError(f"splits: missing required split {key!r}")
    fractions = {name: float(value) for name, value in raw.items()}
    if any(f <= 0 for f in fractions.values()):
        raise ConfigError("splits: fractions must be positive")
    if sum(fractions.values()) > 1.0 + 1e-9:
        raise ConfigError("splits: fractions must sum to at most 1")
    if mode == "held_out" and "calibration" not in fractions:
        raise ConfigError("splits: held_out calibration requires a 'calibration' fraction")
    return fractions


def _parse_sweep(raw: dict) -> SweepSpec:
    spec = SweepSpec(
        k_values=tuple(float(k) for k in raw.get("k_values", SweepSpec.k_values)),
        concave_k_values=tuple(float(k) for k in raw.get("concave_k_values", SweepSpec.concave_k_values)),
        checkpoint_counts=tuple(int(c) for c in raw.get("checkpoint_counts", SweepSpec.checkpoint_counts)),
        seeds=tuple(int(s) for s in raw.get("seeds", ())),
    )
    if not spec.k_values or not spec.checkpoint_counts:
        raise ConfigError("sweep: parameter grids must be nonempty")
    if any(k <= 0 for k in spec.k_values + spec.concave_k_values):
        raise ConfigError("sweep: weight exponents must be positive")
    if any(c < 1 for c in spec.checkpoint_counts):
        raise ConfigError("sweep: checkpoint counts must be positive")
    return spec


def load_config(
    path: str | Path,
    output_dir: str | None = None,
    seed: int | None = None,
) -> ExperimentConfig:
    """Parse and validate a JSON experiment config.

    ``output_dir`` and ``seed`` override the file's values (CLI flags).
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file does not exist: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")

    eff_seed = int(seed if seed is not None else raw.get("seed", 0))
    eff_out = str(output_dir if output_dir is not None else _require(raw, "output_dir", "config"))
    calibration = _parse_calibration(raw.get("calibration", {}))
    return ExperimentConfig(
        seed=eff_seed,
        output_dir=eff_out,
        dataset=_parse_dataset(_require(raw, "dataset", "config")),
        train=_parse_train(_require(raw, "train", "config"), eff_seed),
        score_methods=_parse_methods(_require(raw, "scores", "config")),
        calibration=calibration,
        splits=_parse_splits(_require(raw, "splits", "config"), calibration.mode),
        sweep=_parse_sweep(raw.get("sweep", {})),
    )
