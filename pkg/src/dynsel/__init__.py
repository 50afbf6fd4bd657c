"""Selective classification from checkpointed training dynamics.

Train a small classifier while recording per-checkpoint predictions on an
evaluation set, score each example by how late and how often the checkpoints
disagreed with the final prediction, and gate predictions on that score to
trade coverage for accuracy.
"""

from .datasets import Dataset, DatasetFormatError, load_csv, load_dataset, load_idx, split_dataset, synth_blobs
from .dynamics import (
    BoundUndefinedError,
    DynamicsProfile,
    estimate_dynamics,
    markov_bound,
    simulate_disagreement_process,
)
from .nn import (
    Model,
    TrainConfig,
    TrainingDivergedError,
    expected_checkpoint_count,
    init_model,
    loss_and_gradient,
    predict,
    predict_batch,
    train,
)
from .scores import (
    DEFAULT_K,
    EtModel,
    ScoredSet,
    WeightSchedule,
    continuous_metric,
    method_id,
    score_avg,
    score_jump,
    score_min,
    score_trace,
    score_var,
    softmax_response,
    variance_weights,
    weight_schedule,
)
from .selective import (
    RiskCoverageCurve,
    SelectiveResult,
    auroc,
    calibrate_for_coverage,
    calibrate_for_error,
    coverage_accuracy,
    gate,
    risk_coverage_curve,
)
from .trace import (
    BadMagicError,
    HeaderPayloadMismatchError,
    PredictionTrace,
    TraceFormatError,
    TruncatedTraceError,
    UnsupportedVersionError,
    disagreement_matrix,
    disagreement_vector,
    evenly_spaced_checkpoints,
    export_trace_csv,
    read_trace,
    subsample_checkpoints,
    write_trace,
)

__version__ = "0.1.0"
