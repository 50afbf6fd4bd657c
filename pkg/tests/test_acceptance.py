"""Acceptance suite: one test per release criterion.

Each test prints a single [acceptance] PASS/FAIL line, checks exact values
against independently coded oracles where the contract demands exactness,
and enforces the stated runtime budgets.
"""

import functools
import json
import math
import time

import numpy as np
import pytest

from dynsel.cli import main
from dynsel.datasets import synth_blobs
from dynsel.dynamics import estimate_dynamics, markov_bound, simulate_disagreement_process
from dynsel.nn import TrainConfig, init_model, loss_and_gradient, predict, train
from dynsel.scores import (
    EtModel,
    continuous_metric,
    score_avg,
    score_jump,
    score_min,
    score_trace,
    score_var,
    softmax_response,
    weight_schedule,
)
from dynsel.selective import (
    auroc,
    calibrate_for_coverage,
    calibrate_for_error,
    gate,
    risk_coverage_curve,
)
from dynsel.trace import PredictionTrace, disagreement_vector
from support import (
    brute_force_calibrate_coverage,
    brute_force_calibrate_error,
    brute_force_curve,
    make_random_trace,
    random_instance,
)

TOL = 1e-12


def criterion(name):
    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                result = fn(*args, **kwargs)
            except BaseException:
                print(f"[acceptance] {name}: FAIL")
                raise
            print(f"[acceptance] {name}: PASS")
            return result

        return wrapper

    return decorate


@pytest.fixture(scope="module")
def desk_run():
    """One desk-scale training run shared by the dynamics and selective-gain
    criteria: 2-class blobs, 10% label noise on the N=2000 training set,
    126 checkpoints. The evaluation split is a fresh draw from the same blobs
    without label flips, so its errors are genuine model mistakes rather than
    relabeled points no score could detect."""
    centers = [[-1.6, 0.0], [1.6, 0.0]]
    started = time.perf_counter()
    train_data = synth_blobs(centers, 1.0, [1000, 1000], label_noise_rate=0.1, seed=7)
    eval_data = synth_blobs(centers, 1.0, [600, 600], label_noise_rate=0.0, seed=1007)
    config = TrainConfig(
        layer_sizes=(2, 32, 2),
        activation="relu",
        optimizer="momentum",
        learning_rate=0.05,
        momentum=0.9,
        batch_size=32,
        epochs=20,
        checkpoint_every=10,
        seed=7,
    )
    trace, _model = train(config, train_data, eval_data)
    return trace, time.perf_counter() - started


@criterion("oracle equivalence (curve + both calibrations, 1000 instances)")
def test_oracle_equivalence():
    rng = np.random.default_rng(2024)
    started = time.perf_counter()
    error_targets = [0.0, 0.005, 0.02, 0.1, 0.3]
    coverage_targets = [0.05, 0.25, 0.5, 0.9, 1.0]
    for trial in range(1000):
        scores, correctness = random_instance(rng, max_n=100)

        assert list(risk_coverage_curve(scores, correctness).points()) == brute_force_curve(
            scores, correctness
        )

        target = error_targets[trial % len(error_targets)]
        expected = brute_force_calibrate_error(scores, correctness, target)
        tau, result = calibrate_for_error(scores, correctness, target)
        if expected is None:
            assert result.is_empty and tau == math.inf
        else:
            assert (tau, result.coverage, result.error) == expected
            assert result.accept_mask.tolist() == (scores >= tau).tolist()

        target_cov = coverage_targets[trial % len(coverage_targets)]
        tau_cov, result_cov = calibrate_for_coverage(scores, target_cov)
        assert tau_cov == brute_force_calibrate_coverage(scores, target_cov)
        assert result_cov.accept_mask.tolist() == (scores >= tau_cov).tolist()
    assert time.perf_counter() - started < 60.0


@criterion("formula suite (hand examples at 1e-12)")
def test_formula_suite():
    # disagreement with the final label, evaluated directly
    labels = np.array([[1, 0, 1, 0], [1, 1, 1, 0]], dtype=np.uint16).T
    trace = PredictionTrace(labels=labels, checkpoint_steps=[1, 2, 3, 4], n_classes=2)
    assert disagreement_vector(trace, 0).tolist() == [1, 0, 1, 0]
    assert disagreement_vector(trace, 1).tolist() == [1, 1, 1, 0]

    v4 = weight_schedule(4, 1.0)
    assert np.max(np.abs(v4.values - np.array([0.75, 0.5, 0.25, 0.0]))) <= TOL
    assert abs(weight_schedule(4, 0.05).values[0] - (1.0 - 0.25**0.05)) <= TOL

    assert abs(score_min(np.array([1, 0, 1, 0]), v4) - 0.25) <= TOL
    assert score_min(np.zeros(4), v4) == 1.0
    adjusted = score_min(np.array([1, 0, 0, 0]), v4, EtModel.empirical([0.5, 0, 0, 0]))
    assert abs(adjusted - 1.0) <= TOL  # 0.75 / 0.25 = 3.0 clamps to 1

    assert abs(score_avg(np.array([1, 0, 1, 0]), v4) - 0.5) <= TOL
    assert abs(score_avg(np.array([1, 1, 1, 0]), v4) - 0.5) <= TOL

    assert abs(score_jump(np.array([0, 0, 1, 1]), v4) - 0.75) <= TOL
    assert abs(score_jump(np.array([0, 1, 0, 1]), v4) - 0.25) <= TOL

    assert abs(score_var(np.array([0.0, 1.0]), np.array([0.5, 1.0])) + 0.375) <= TOL

    assert abs(markov_bound([1], [0.0], [0.5]) - 0.5) <= TOL
    assert abs(markov_bound([1, 1], [0.5, 0.0], [0.25, 0.09]) - 0.09) <= TOL

    p = np.array([0.7, 0.2, 0.1])
    assert abs(continuous_metric(p, "confidence") - 0.7) <= TOL
    assert abs(continuous_metric(p, "gap") - 0.5) <= TOL
    entropy_oracle = sum(float(x) * math.log(float(x)) for x in p)
    assert abs(continuous_metric(p, "negative_entropy") - entropy_oracle) <= TOL
    assert abs(softmax_response(np.array([0.05, 0.35, 0.60])) - 0.60) <= TOL

    from dynsel.nn import Model

    big = Model(weights=[np.array([[1000.0, 0.0]])], biases=[np.zeros(2)], activation="relu")
    probs = predict(big, np.array([1.0]))
    assert np.all(np.isfinite(probs)) and probs[0] > 1 - TOL and probs[1] < TOL


@criterion("Bernoulli identity v = e(1-e) with zero final checkpoint")
def test_bernoulli_identity(desk_run):
    rng = np.random.default_rng(5)
    profiles = [
        estimate_dynamics(
            make_random_trace(
                rng,
                n_checkpoints=int(rng.integers(1, 10)),
                n_examples=int(rng.integers(2, 40)),
            )
        )
        for _ in range(60)
    ]
    profiles.append(estimate_dynamics(desk_run[0]))
    for profile in profiles:
        for e, v in (
            (profile.e_correct, profile.v_correct),
            (profile.e_incorrect, profile.v_incorrect),
        ):
            if e is None:
                continue
            assert np.max(np.abs(v - e * (1.0 - e))) <= TOL
        if profile.e_correct is not None:
            assert profile.e_correct[-1] == 0.0
            assert profile.v_correct[-1] == 0.0


@criterion("adjusted scores with zero e_t equal plain scores exactly")
def test_adjusted_score_consistency():
    rng = np.random.default_rng(6)
    for _ in range(10_000):
        t_count = int(rng.integers(1, 40))
        v = weight_schedule(t_count, float(rng.uniform(0.01, 2.0)))
        a = np.zeros(t_count, dtype=np.uint8)
        if t_count > 1:
            a[: t_count - 1] = rng.integers(0, 2, t_count - 1)
        zero_e = EtModel.empirical(np.zeros(t_count))
        assert score_min(a, v, zero_e) == score_min(a, v)
        assert score_avg(a, v, zero_e) == score_avg(a, v)


def _relu_margin(model, x) -> float:
    """Smallest |pre-activation| of the hidden layers; central differences
    are only a valid oracle when no relu kink sits inside the step window."""
    h = x
    margin = math.inf
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        pre = h @ w + b
        margin = min(margin, float(np.abs(pre).min()))
        h = np.maximum(pre, 0.0)
    return margin


@criterion("analytic gradients match central finite differences (20 networks)")
def test_gradient_check():
    rng = np.random.default_rng(7)
    started = time.perf_counter()
    eps = 1e-6
    for _ in range(20):
        depth = int(rng.integers(2, 4))
        sizes = [int(rng.integers(2, 5)) for _ in range(depth + 1)]
        activation = str(rng.choice(["relu", "tanh"]))
        model = init_model(sizes, activation, rng)
        while True:
            x = rng.standard_normal((int(rng.integers(1, 6)), sizes[0]))
            y = rng.integers(0, sizes[-1], x.shape[0])
            if activation == "tanh" or _relu_margin(model, x) > 1e-3:
                break
        _, grads = loss_and_gradient(model, x, y)
        for arrays, grad_arrays in ((model.weights, grads.weights), (model.biases, grads.biases)):
            for arr, grad in zip(arrays, grad_arrays):
                it = np.nditer(arr, flags=["multi_index"])
                for _ in it:
                    idx = it.multi_index
                    orig = arr[idx]
                    arr[idx] = orig + eps
                    up, _ = loss_and_gradient(model, x, y)
                    arr[idx] = orig - eps
                    down, _ = loss_and_gradient(model, x, y)
                    arr[idx] = orig
                    numeric = (up - down) / (2 * eps)
                    denom = max(abs(numeric), abs(grad[idx]), 1e-8)
                    assert abs(numeric - grad[idx]) / denom < 1e-4
    assert time.perf_counter() - started < 30.0


@criterion("desk-scale dynamics: late e_correct < 0.05 and below e_incorrect")
def test_desk_scale_dynamics(desk_run):
    trace, elapsed = desk_run
    assert elapsed < 120.0
    assert trace.n_checkpoints >= 100
    profile = estimate_dynamics(trace)
    window = trace.n_checkpoints // 5
    late_correct = profile.e_correct[-window:]
    late_incorrect = profile.e_incorrect[-window:]
    assert np.all(late_correct < 0.05)
    assert late_incorrect.mean() > late_correct.mean()


@criterion("desk-scale selective gain of the average score at 90% coverage")
def test_desk_scale_selective_gain(desk_run):
    trace, _ = desk_run
    scored = score_trace(trace, "avg", k=0.05)
    correctness = scored.correctness()
    full_error = 1.0 - correctness.mean()
    _tau, at_90 = calibrate_for_coverage(scored.scores, 0.9, correctness)
    assert at_90.coverage >= 0.9
    assert at_90.error < full_error
    assert auroc(scored.scores, correctness) > 0.5 + 0.1


@criterion("monotone transform x^3+x changes no accept set or curve point")
def test_monotone_transform_invariance():
    rng = np.random.default_rng(8)
    for _ in range(100):
        scores, correctness = random_instance(rng, max_n=60)
        mapped = scores**3 + scores
        curve_raw = risk_coverage_curve(scores, correctness)
        curve_mapped = risk_coverage_curve(mapped, correctness)
        assert curve_raw.coverages.tolist() == curve_mapped.coverages.tolist()
        assert curve_raw.errors.tolist() == curve_mapped.errors.tolist()
        for idx in range(len(curve_raw)):
            raw_mask = gate(scores, float(curve_raw.thresholds[idx]))
            mapped_mask = gate(mapped, float(curve_mapped.thresholds[idx]))
            assert raw_mask.tolist() == mapped_mask.tolist()
        for target in (0.0, 0.1, 0.4):
            _, res_raw = calibrate_for_error(scores, correctness, target)
            _, res_mapped = calibrate_for_error(mapped, correctness, target)
            assert res_raw.accept_mask.tolist() == res_mapped.accept_mask.tolist()
        for target in (0.25, 0.9, 1.0):
            _, res_raw = calibrate_for_coverage(scores, target)
            _, res_mapped = calibrate_for_coverage(mapped, target)
            assert res_raw.accept_mask.tolist() == res_mapped.accept_mask.tolist()


@criterion("Markov bound sound on simulated processes (1e5 samples)")
def test_markov_bound_soundness():
    e = np.array([0.9, 0.7, 0.5, 0.3, 0.2, 0.1, 0.05, 0.0])
    v = e * (1.0 - e)
    n = 100_000
    samples = simulate_disagreement_process(e, n, seed=99)
    sequences = [
        [1, 1, 1, 1, 0, 0, 0, 0],
        [1, 0, 1, 0, 1, 0, 1, 0],
        [0, 0, 0, 1, 1, 1, 1, 0],
        [1, 1, 0, 0, 0, 0, 1, 0],
    ]
    for a in sequences:
        a_arr = np.asarray(a, dtype=np.float64)
        informative = np.abs(a_arr - e) > TOL
        for t in np.flatnonzero(informative):
            frequency = float((samples[:, t] == a[t]).mean())
            term = float(v[t] / abs(a_arr[t] - e[t]) ** 2)
            p_true = e[t] if a[t] == 1 else 1.0 - e[t]
            slack = 3.0 * math.sqrt(p_true * (1.0 - p_true) / n)
            assert frequency <= term + slack
        # the combined bound is also a valid probability bound for the event
        bound = markov_bound(a_arr, e, v)
        joint = float((samples == np.asarray(a)[np.newaxis, :]).all(axis=1).mean())
        assert joint <= bound + 3.0 / math.sqrt(n)


@criterion("pipeline determinism: rerun produces byte-identical payloads")
def test_pipeline_determinism(tmp_path, capsys):
    config = {
        "seed": 21,
        "output_dir": "",
        "dataset": {
            "kind": "synthetic",
            "centers": [[-1.8, 0.0], [1.8, 0.0]],
            "covariances": 1.0,
            "counts": [150, 150],
            "label_noise_rate": 0.05,
        },
        "splits": {"train": 0.5, "calibration": 0.25, "eval": 0.25},
        "train": {
            "layer_sizes": [2, 8, 2],
            "optimizer": "momentum",
            "learning_rate": 0.05,
            "batch_size": 16,
            "epochs": 8,
            "checkpoint_every": 5,
        },
        "scores": [{"method": "avg", "k": 0.05}, {"method": "softmax_response"}],
        "calibration": {
            "mode": "held_out",
            "target_errors": [0.02, 0.2],
            "target_coverages": [1.0, 0.9],
        },
    }
    payloads = {}
    for label in ("first", "second"):
        out = tmp_path / label
        config["output_dir"] = str(out)
        config_path = tmp_path / f"config_{label}.json"
        config_path.write_text(json.dumps(config))
        for command in ("train", "score", "dynamics", "evaluate"):
            argv = [command, "-c", str(config_path)]
            if command in ("dynamics", "evaluate"):
                argv.append("--no-figures")
            assert main(argv) == 0
        payloads[label] = {
            path.relative_to(out).as_posix(): path.read_bytes()
            for path in sorted(out.rglob("*"))
            if path.is_file() and path.name != "run_meta.json"
        }
    capsys.readouterr()
    assert set(payloads["first"]) == set(payloads["second"])
    for rel, blob in payloads["first"].items():
        assert payloads["second"][rel] == blob, rel
