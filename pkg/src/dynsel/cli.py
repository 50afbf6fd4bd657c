"""Command-line pipeline: train -> score -> dynamics -> evaluate -> sweep.

Each subcommand reads and writes a shared run directory:

    trace.bin            recorded prediction trace
    run_meta.json        run provenance (the only place timestamps live)
    scores/<id>.csv      one scored set per method
    dynamics.csv         disagreement mean/variance per population
    report.json          calibrated operating points per method
    curves/<id>_risk_coverage.csv
    sweep/               weight-exponent and checkpoint-resolution studies
    figures/*.png        plots rendered next to the delimited output

Exit codes: 0 success, 1 validation/config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .datasets import Dataset, DatasetFormatError, concat_datasets, split_dataset
from .dynamics import estimate_dynamics, write_profile_csv
from .nn import TrainingDivergedError, train
from .report import (
    save_dynamics_figure,
    save_k_sweep_figure,
    save_resolution_figure,
    save_risk_coverage_figure,
    save_score_distribution_figure,
)
from .scores import (
    EtModel,
    ScoredSet,
    read_scored_csv,
    score_trace,
    write_scored_csv,
)
from .selective import (
    RiskCoverageCurve,
    auroc,
    calibrate_for_coverage,
    calibrate_for_error,
    coverage_accuracy,
    gate,
    risk_coverage_curve,
    write_curve_csv,
)
from .trace import (
    PredictionTrace,
    TraceFormatError,
    evenly_spaced_checkpoints,
    export_trace_csv,
    read_trace,
    subsample_checkpoints,
    write_trace,
)

__all__ = [
    "cmd_train",
    "cmd_score",
    "cmd_dynamics",
    "cmd_evaluate",
    "cmd_sweep",
    "cmd_trace_export",
    "main",
]


def _out_dir(config: ExperimentConfig | None, override: str | None) -> Path:
    if override is not None:
        return Path(override)
    if config is not None:
        return Path(config.output_dir)
    raise ConfigError("no output directory: pass --output-dir or a config file")


def _tau_json(tau: float):
    # report JSON stays strict-JSON parseable: infinities become strings
    if math.isfinite(tau):
        return tau
    return "inf" if tau > 0 else "-inf"


def _build_eval_sets(config: ExperimentConfig) -> tuple[Dataset, Dataset, int]:
    """Returns (train split, calibration+report eval set, calibration count).

    The trace is evaluated on calibration and report examples together, with
    the calibration block first, so one trace serves both protocols.
    """
    dataset = config.dataset.load(config.seed)
    splits = split_dataset(dataset, config.splits, config.seed)
    train_set = splits["train"]
    report_set = splits["eval"]
    calibration = splits.get("calibration")
    if calibration is None:
        return train_set, report_set, 0
    return train_set, concat_datasets([calibration, report_set]), calibration.n_examples


def cmd_train(config: ExperimentConfig, out_dir: str | None = None) -> Path:
    """Train per config and write trace.bin plus run_meta.json."""
    out = _out_dir(config, out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_set, eval_set, n_calibration = _build_eval_sets(config)
    train_config = dataclasses.replace(
        config.train,
        eval_split=f"{config.dataset.kind} calibration+eval splits, calibration block first",
    )
    trace, _model = train(train_config, train_set, eval_set)
    trace_path = out / "trace.bin"
    write_trace(trace, trace_path)

    meta = {
        "created_at": datetime.now(timezone.utc).isoformat(),
        "package_version": __version__,
        "seed": config.seed,
        "config": config.to_dict(),
        "splits": {
            "train": train_set.n_examples,
            "calibration": n_calibration,
            "report": eval_set.n_examples - n_calibration,
        },
        "eval_layout": {"calibration_first": True, "n_calibration": n_calibration},
        "trace": {
            "n_checkpoints": trace.n_checkpoints,
            "n_examples": trace.n_examples,
            "n_classes": trace.n_classes,
            "first_step": int(trace.checkpoint_steps[0]),
            "last_step": int(trace.checkpoint_steps[-1]),
            # checkpoints start after at least one optimizer step; the
            # untrained model is never part of a trace
            "records_untrained_model": False,
        },
    }
    (out / "run_meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    print(f"wrote {trace_path}")
    return trace_path


def _score_kwargs(spec: dict, trace: PredictionTrace) -> dict:
    kwargs: dict = {}
    if "k" in spec:
        kwargs["k"] = float(spec["k"])
    if "metric" in spec:
        kwargs["metric"] = spec["metric"]
    if "k_w" in spec:
        kwargs["k_w"] = float(spec["k_w"])
    if "normalized" in spec:
        kwargs["normalized"] = bool(spec["normalized"])
    e_model = spec.get("e_model")
    if e_model:
        variant = e_model["variant"]
        if variant == "smooth":
            kwargs["e_model"] = EtModel.smooth(float(e_model["exponent"]))
        elif variant == "empirical":
            profile = estimate_dynamics(trace)
            if profile.e_correct is None:
                raise ValueError(
                    "empirical e_t model needs at least one finally-correct example"
                )
            kwargs["e_model"] = EtModel.empirical(profile.e_correct)
    return kwargs


def cmd_score(
    config: ExperimentConfig, out_dir: str | None = None, trace_path: str | None = None
) -> list[Path]:
    """Score the trace with every configured method, one CSV per method."""
    out = _out_dir(config, out_dir)
    source = Path(trace_path) if trace_path else out / "trace.bin"
    trace = read_trace(source)
    scores_dir = out / "scores"
    scores_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for spec in config.score_methods:
        scored = score_trace(trace, spec["method"], **_score_kwargs(spec, trace))
        path = scores_dir / f"{scored.method_id}.csv"
        write_scored_csv(scored, path)
        written.append(path)
        print(f"wrote {path}")
    return written


def cmd_dynamics(
    out_dir: str, trace_path: str | None = None, figures: bool = True
) -> Path:
    """Estimate per-population disagreement dynamics and export them."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source = Path(trace_path) if trace_path else out / "trace.bin"
    profile = estimate_dynamics(read_trace(source))
    csv_path = out / "dynamics.csv"
    write_profile_csv(profile, csv_path)
    print(f"wrote {csv_path}")
    if figures:
        fig_path = save_dynamics_figure(profile, out / "figures" / "dynamics.png")
        print(f"wrote {fig_path}")
    return csv_path


def _split_populations(
    scored: ScoredSet, n_calibration: int, mode: str
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(calibration scores, calibration correctness, report scores, report correctness)."""
    correctness = scored.correctness()
    if mode == "held_out":
        if n_calibration <= 0:
            raise ValueError(
                "held_out calibration needs a calibration block in the trace; "
                "re-run train with a 'calibration' split fraction"
            )
        if n_calibration >= scored.n_examples:
            raise ValueError("calibration block leaves no report examples")
        return (
            scored.scores[:n_calibration],
            correctness[:n_calibration],
            scored.scores[n_calibration:],
            correctness[n_calibration:],
        )
    return scored.scores, correctness, scored.scores, correctness


def _operating_point(scores, correctness, tau: float) -> tuple[float, float | None]:
    coverage, accuracy = coverage_accuracy(gate(scores, tau), correctness)
    return coverage, None if accuracy is None else 1.0 - accuracy


def _evaluate_method(
    scored: ScoredSet, n_calibration: int, config: ExperimentConfig
) -> tuple[dict, "RiskCoverageCurve"]:
    mode = config.calibration.mode
    cal_scores, cal_correct, rep_scores, rep_correct = _split_populations(
        scored, n_calibration, mode
    )
    curve = risk_coverage_curve(rep_scores, rep_correct)
    entry: dict = {
        "n_calibration": int(cal_scores.shape[0]) if mode == "held_out" else 0,
        "n_report": int(rep_scores.shape[0]),
        "full_coverage_error": float(curve.errors[0]),
        "auroc": auroc(rep_scores, rep_correct)
        if 0 < int(rep_correct.sum()) < rep_correct.shape[0]
        else None,
        "at_target_error": [],
        "at_target_coverage": [],
    }
    for target in config.calibration.target_errors:
        tau, result = calibrate_for_error(cal_scores, cal_correct, target)
        coverage, error = (0.0, None) if result.is_empty else _operating_point(rep_scores, rep_correct, tau)
        entry["at_target_error"].append(
            {
                "target": target,
                "tau": _tau_json(tau),
                "feasible": not result.is_empty,
                "coverage": coverage,
                "error": error,
            }
        )
    for target in config.calibration.target_coverages:
        tau, _result = calibrate_for_coverage(cal_scores, target, cal_correct)
        coverage, error = _operating_point(rep_scores, rep_correct, tau)
        entry["at_target_coverage"].append(
            {"target": target, "tau": _tau_json(tau), "coverage": coverage, "error": error}
        )
    return entry, curve


def cmd_evaluate(
    config: ExperimentConfig, out_dir: str | None = None, figures: bool = True
) -> Path:
    """Build report.json and per-method risk-coverage curves from scored CSVs."""
    out = _out_dir(config, out_dir)
    scores_dir = out / "scores"
    if not scores_dir.is_dir():
        raise ConfigError(f"missing scores directory {scores_dir}; run 'dynsel score' first")
    score_files = sorted(scores_dir.glob("*.csv"))
    if not score_files:
        raise ConfigError(f"no scored sets in {scores_dir}")

    n_calibration = 0
    meta_path = out / "run_meta.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        n_calibration = int(meta.get("eval_layout", {}).get("n_calibration", 0))

    curves_dir = out / "curves"
    curves_dir.mkdir(parents=True, exist_ok=True)
    report: dict = {
        "calibration_mode": config.calibration.mode,
        "target_errors": list(config.calibration.target_errors),
        "target_coverages": list(config.calibration.target_coverages),
        "methods": {},
    }
    curve_by_method = {}
    for path in score_files:
        scored = read_scored_csv(path)
        if scored.true_labels is None:
            raise ValueError(f"{path}: missing true_label column needed for evaluation")
        entry, curve = _evaluate_method(scored, n_calibration, config)
        curve_path = curves_dir / f"{scored.method_id}_risk_coverage.csv"
        write_curve_csv(curve, curve_path)
        entry["curve_csv"] = str(curve_path.relative_to(out))
        report["methods"][scored.method_id] = entry
        curve_by_method[scored.method_id] = curve
        if figures:
            save_score_distribution_figure(
                scored, out / "figures" / f"score_distribution_{scored.method_id}.png"
            )

    report_path = out / "report.json"
    report_path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    print(f"wrote {report_path}")
    if figures:
        fig_path = save_risk_coverage_figure(curve_by_method, out / "figures" / "risk_coverage.png")
        print(f"wrote {fig_path}")
    return report_path


def _calibrated_row(scores, correctness, n_calibration: int, mode: str,
                    target_kind: str, target: float) -> dict:
    if mode == "held_out":
        cal_s, cal_c = scores[:n_calibration], correctness[:n_calibration]
        rep_s, rep_c = scores[n_calibration:], correctness[n_calibration:]
    else:
        cal_s, cal_c, rep_s, rep_c = scores, correctness, scores, correctness
    if target_kind == "error":
        tau, result = calibrate_for_error(cal_s, cal_c, target)
        if result.is_empty:
            return {"tau": _tau_json(tau), "coverage": "", "error": ""}
    else:
        tau, _ = calibrate_for_coverage(cal_s, target, cal_c)
    coverage, error = _operating_point(rep_s, rep_c, tau)
    return {
        "tau": _tau_json(tau),
        "coverage": coverage,
        "error": "" if error is None else error,
    }


def _write_rows_csv(path: Path, fieldnames: list[str], rows: list[dict]) -> None:
    import csv as _csv

    with open(path, "w", newline="") as fh:
        writer = _csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _summarize(rows: list[dict], group_keys: list[str]) -> list[dict]:
    """Mean and sample stddev (ddof=1, 0.0 for a single seed) of coverage and
    error across seeds, per parameter/target group. Rows with empty cells
    (infeasible calibrations) are skipped and counted."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in group_keys), []).append(row)
    summary = []
    for key in sorted(groups, key=lambda k: tuple(str(x) for x in k)):
        members = groups[key]
        feasible = [r for r in members if r["coverage"] != "" and r["error"] != ""]
        entry = dict(zip(group_keys, key))
        entry["n_seeds"] = len(members)
        entry["n_feasible"] = len(feasible)
        for col in ("coverage", "error"):
            values = np.array([float(r[col]) for r in feasible])
            entry[f"{col}_mean"] = repr(float(values.mean())) if values.size else ""
            entry[f"{col}_std"] = (
                repr(float(values.std(ddof=1))) if values.size > 1
                else ("0.0" if values.size == 1 else "")
            )
        summary.append(entry)
    return summary


def cmd_sweep(config: ExperimentConfig, out_dir: str | None = None, figures: bool = True) -> Path:
    """Weight-exponent and checkpoint-resolution studies over one or more seeds.

    The dataset and its splits are fixed by the config seed; only training
    randomness varies across sweep seeds. Thresholds are calibrated per seed
    and the summary reports mean/stddev of the per-seed operating points.
    """
    out = _out_dir(config, out_dir)
    sweep_dir = out / "sweep"
    sweep_dir.mkdir(parents=True, exist_ok=True)
    train_set, eval_set, n_calibration = _build_eval_sets(config)
    mode = config.calibration.mode
    targets = [("error", t) for t in config.calibration.target_errors] + [
        ("coverage", t) for t in config.calibration.target_coverages
    ]

    k_rows: list[dict] = []
    res_rows: list[dict] = []
    k_grid = sorted(set(config.sweep.k_values) | set(config.sweep.concave_k_values))
    for seed in config.sweep_seeds:
        train_config = dataclasses.replace(config.train, seed=seed)
        trace, _ = train(train_config, train_set, eval_set)
        truth = np.asarray(trace.true_labels)
        correctness = trace.final_labels == truth
        for k in k_grid:
            scored = score_trace(trace, "avg", k=k)
            for target_kind, target in targets:
                row = {
                    "seed": seed,
                    "k": f"{k:g}",
                    "shape": "convex" if k <= 1.0 else "concave",
                    "target_kind": target_kind,
                    "target": f"{target:g}",
                }
                row.update(
                    _calibrated_row(scored.scores, correctness, n_calibration, mode,
                                    target_kind, target)
                )
                k_rows.append(row)
        for requested in config.sweep.checkpoint_counts:
            count = min(requested, trace.n_checkpoints)
            sub = subsample_checkpoints(
                trace, evenly_spaced_checkpoints(trace.n_checkpoints, count)
            )
            scored = score_trace(sub, "avg")
            for target_kind, target in targets:
                row = {
                    "seed": seed,
                    "n_requested": requested,
                    "n_checkpoints": sub.n_checkpoints,
                    "target_kind": target_kind,
                    "target": f"{target:g}",
                }
                row.update(
                    _calibrated_row(scored.scores, correctness, n_calibration, mode,
                                    target_kind, target)
                )
                res_rows.append(row)

    k_fields = ["seed", "k", "shape", "target_kind", "target", "tau", "coverage", "error"]
    res_fields = ["seed", "n_requested", "n_checkpoints", "target_kind", "target",
                  "tau", "coverage", "error"]
    _write_rows_csv(sweep_dir / "k_sweep.csv", k_fields, k_rows)
    _write_rows_csv(sweep_dir / "resolution_sweep.csv", res_fields, res_rows)

    k_summary = _summarize(k_rows, ["k", "shape", "target_kind", "target"])
    res_summary = _summarize(res_rows, ["n_checkpoints", "target_kind", "target"])
    _write_rows_csv(
        sweep_dir / "k_sweep_summary.csv",
        ["k", "shape", "target_kind", "target", "n_seeds", "n_feasible",
         "coverage_mean", "coverage_std", "error_mean", "error_std"],
        k_summary,
    )
    _write_rows_csv(
        sweep_dir / "resolution_sweep_summary.csv",
        ["n_checkpoints", "target_kind", "target", "n_seeds", "n_feasible",
         "coverage_mean", "coverage_std", "error_mean", "error_std"],
        res_summary,
    )
    (sweep_dir / "sweep_meta.json").write_text(
        json.dumps(
            {
                "seeds": list(config.sweep_seeds),
                "aggregation": "thresholds are calibrated independently per seed; "
                "summary rows report mean and sample stddev (ddof=1) of the "
                "per-seed coverage and error",
            },
            sort_keys=True,
            indent=2,
        )
        + "\n"
    )
    print(f"wrote {sweep_dir / 'k_sweep.csv'}")
    print(f"wrote {sweep_dir / 'resolution_sweep.csv'}")
    if figures:
        mean_rows = [
            {**row, "coverage": row["coverage_mean"], "error": row["error_mean"]}
            for row in k_summary
        ]
        save_k_sweep_figure(mean_rows, out / "figures" / "k_sweep.png")
        mean_res = [
            {**row, "coverage": row["coverage_mean"], "error": row["error_mean"]}
            for row in res_summary
        ]
        save_resolution_figure(mean_res, out / "figures" / "resolution_sweep.png")
        print(f"wrote {out / 'figures' / 'k_sweep.png'}")
        print(f"wrote {out / 'figures' / 'resolution_sweep.png'}")
    return sweep_dir


def cmd_trace_export(out_dir: str, trace_path: str | None = None) -> Path:
    """Dump the trace to CSV for external analysis."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source = Path(trace_path) if trace_path else out / "trace.bin"
    trace = read_trace(source)
    csv_path = out / "trace.csv"
    export_trace_csv(trace, csv_path)
    print(f"wrote {csv_path}")
    return csv_path


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynsel",
        description="Selective classification from checkpointed training dynamics.",
    )
    parser.add_argument("--version", action="version", version=f"dynsel {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, config_required: bool) -> None:
        p.add_argument("-c", "--config", required=config_required,
                       help="path to the JSON experiment config")
        p.add_argument("-o", "--output-dir", default=None,
                       help="run directory (defaults to the config's output_dir)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p = sub.add_parser("train", help="train a model and record its prediction trace")
    common(p, True)

    p = sub.add_parser("score", help="score a trace with every configured method")
    common(p, True)
    p.add_argument("--trace", default=None, help="trace file (defaults to <run>/trace.bin)")

    p = sub.add_parser("dynamics", help="estimate disagreement dynamics per population")
    common(p, False)
    p.add_argument("--trace", default=None, help="trace file (defaults to <run>/trace.bin)")
    p.add_argument("--no-figures", action="store_true", help="skip figure rendering")

    p = sub.add_parser("evaluate", help="calibrate thresholds and build the report")
    common(p, True)
    p.add_argument("--no-figures", action="store_true", help="skip figure rendering")

    p = sub.add_parser("sweep", help="weight-exponent and checkpoint-resolution studies")
    common(p, True)
    p.add_argument("--no-figures", action="store_true", help="skip figure rendering")

    p = sub.add_parser("trace-export", help="dump a trace to CSV")
    common(p, False)
    p.add_argument("--trace", default=None, help="trace file (defaults to <run>/trace.bin)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = None
        if args.config is not None:
            config = load_config(args.config, output_dir=args.output_dir, seed=args.seed)
        if args.command == "train":
            cmd_train(config, args.output_dir)
        elif args.command == "score":
            cmd_score(config, args.output_dir, trace_path=args.trace)
        elif args.command == "dynamics":
            out = _out_dir(config, args.output_dir)
            cmd_dynamics(str(out), trace_path=args.trace, figures=not args.no_figures)
        elif args.command == "evaluate":
            cmd_evaluate(config, args.output_dir, figures=not args.no_figures)
        elif args.command == "sweep":
            cmd_sweep(config, args.output_dir, figures=not args.no_figures)
        elif args.command == "trace-export":
            out = _out_dir(config, args.output_dir)
            cmd_trace_export(str(out), trace_path=args.trace)
    except (ConfigError, DatasetFormatError, TraceFormatError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingDivergedError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # anything unexpected is a runtime failure
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
