import math

import numpy as np
import pytest

from dynsel.selective import (
    auroc,
    calibrate_for_coverage,
    calibrate_for_error,
    coverage_accuracy,
    gate,
    read_curve_csv,
    risk_coverage_curve,
    write_curve_csv,
)
from support import (
    brute_force_auroc,
    brute_force_calibrate_coverage,
    brute_force_calibrate_error,
    brute_force_curve,
    random_instance,
)


def test_gate_extremes():
    scores = np.array([0.9, 0.8, 0.2, 0.1])
    assert gate(scores, float("-inf")).all()
    assert not gate(scores, 0.9 + 1e-9).any()


def test_gate_threshold_is_inclusive():
    scores = np.array([0.9, 0.8, 0.2, 0.1])
    assert gate(scores, 0.5).tolist() == [True, True, False, False]
    assert gate(scores, 0.8).tolist() == [True, True, False, False]


def test_coverage_accuracy_counts():
    cov, acc = coverage_accuracy([True, True, False, False], [True, False, True, True])
    assert cov == 0.5 and acc == 0.5


def test_coverage_accuracy_full_coverage_equals_plain_accuracy():
    correctness = np.array([True, False, True])
    cov, acc = coverage_accuracy(np.ones(3, dtype=bool), correctness)
    assert cov == 1.0 and acc == correctness.mean()


def test_coverage_accuracy_empty_accept_is_flagged():
    cov, acc = coverage_accuracy(np.zeros(3, dtype=bool), np.ones(3, dtype=bool))
    assert cov == 0.0 and acc is None


def test_coverage_accuracy_length_mismatch():
    with pytest.raises(ValueError, match="length"):
        coverage_accuracy([True], [True, False])


def test_curve_has_n_plus_one_points_for_distinct_scores():
    scores = np.array([0.4, 0.1, 0.9, 0.7])
    curve = risk_coverage_curve(scores, np.array([True, False, True, True]))
    assert len(curve) == 5
    assert curve.thresholds[0] == -math.inf
    assert curve.coverages[0] == 1.0
    assert np.all(np.diff(curve.coverages) <= 0)


def test_curve_reaches_zero_error_under_perfect_ordering():
    scores = np.array([0.9, 0.8, 0.7, 0.2, 0.1])
    correctness = np.array([True, True, True, False, False])
    curve = risk_coverage_curve(scores, correctness)
    at_three_fifths = [p for p in curve.points() if p[1] == 0.6]
    assert at_three_fifths and at_three_fifths[0][2] == 0.0


def test_curve_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(200):
        scores, correctness = random_instance(rng)
        expected = brute_force_curve(scores, correctness)
        curve = risk_coverage_curve(scores, correctness)
        assert list(curve.points()) == expected


def test_calibrate_for_error_hand_example():
    scores = np.array([1.0, 1.0, 0.5, 0.2])
    correctness = np.array([True, True, True, False])
    tau, result = calibrate_for_error(scores, correctness, 0.0)
    assert tau == 0.5
    assert result.coverage == 0.75
    assert result.error == 0.0


def test_calibrate_for_error_loose_target_keeps_full_coverage():
    scores = np.array([0.9, 0.4, 0.6])
    correctness = np.array([True, False, True])
    tau, result = calibrate_for_error(scores, correctness, 0.5)
    assert tau == -math.inf
    assert result.coverage == 1.0


def test_calibrate_for_error_infeasible_returns_empty_flag():
    # the unique top scorer is wrong, so no threshold reaches error 0
    scores = np.array([0.9, 0.5])
    correctness = np.array([False, True])
    tau, result = calibrate_for_error(scores, correctness, 0.0)
    assert tau == math.inf
    assert result.is_empty
    assert result.accuracy is None and result.coverage == 0.0


def test_calibrate_for_error_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(200):
        scores, correctness = random_instance(rng)
        target = float(rng.choice([0.0, 0.005, 0.02, 0.1, 0.3, 0.7]))
        expected = brute_force_calibrate_error(scores, correctness, target)
        tau, result = calibrate_for_error(scores, correctness, target)
        if expected is None:
            assert result.is_empty
        else:
            assert (tau, result.coverage, result.error) == expected


def test_calibrate_for_error_constraint_and_minimality():
    rng = np.random.default_rng(2)
    for _ in range(100):
        scores, correctness = random_instance(rng)
        target = float(rng.choice([0.0, 0.05, 0.2]))
        tau, result = calibrate_for_error(scores, correctness, target)
        if result.is_empty:
            continue
        cov, acc = coverage_accuracy(gate(scores, tau), correctness)
        assert 1.0 - acc <= target
        # no lower threshold may satisfy the target
        for lower in [-math.inf] + sorted({float(s) for s in scores}):
            if lower >= tau:
                break
            _, lower_acc = coverage_accuracy(gate(scores, lower), correctness)
            assert 1.0 - lower_acc > target


def test_calibrate_for_coverage_half_of_four():
    scores = np.array([0.1, 0.4, 0.3, 0.9])
    tau, result = calibrate_for_coverage(scores, 0.5)
    assert tau == 0.4
    assert result.accept_mask.tolist() == [False, True, False, True]
    assert result.coverage == 0.5


def test_calibrate_for_coverage_full_target_uses_min_score():
    scores = np.array([0.5, 0.2, 0.8])
    tau, result = calibrate_for_coverage(scores, 1.0)
    assert tau == 0.2
    assert result.coverage == 1.0


def test_calibrate_for_coverage_tie_block_is_indivisible():
    scores = np.full(5, 0.7)
    tau, result = calibrate_for_coverage(scores, 0.2)
    assert tau == 0.7
    assert result.coverage == 1.0


def test_calibrate_for_coverage_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(200):
        scores, _ = random_instance(rng)
        target = float(rng.choice([0.05, 0.25, 0.5, 0.9, 1.0]))
        tau, result = calibrate_for_coverage(scores, target)
        assert tau == brute_force_calibrate_coverage(scores, target)
        assert result.coverage >= target


def test_calibration_validates_inputs():
    scores = np.array([0.5])
    with pytest.raises(ValueError):
        calibrate_for_error(scores, np.array([True]), 1.0)
    with pytest.raises(ValueError):
        calibrate_for_coverage(scores, 0.0)
    with pytest.raises(ValueError, match="nonempty"):
        calibrate_for_coverage(np.array([]), 0.5)


def test_accept_sets_are_nested_in_tau():
    rng = np.random.default_rng(4)
    scores, _ = random_instance(rng)
    taus = sorted(rng.choice(scores, size=min(5, len(scores)), replace=False).tolist())
    previous = None
    for tau in taus:
        mask = gate(scores, tau)
        if previous is not None:
            assert np.all(previous | ~mask)  # mask is a subset of the previous mask
        previous = mask


def test_auroc_hand_cases():
    assert auroc(np.array([0.9, 0.4, 0.6]), np.array([True, False, True])) == 1.0
    assert auroc(np.full(4, 0.5), np.array([True, False, True, False])) == 0.5


def test_auroc_matches_pairwise_enumeration():
    rng = np.random.default_rng(5)
    for _ in range(50):
        scores, correctness = random_instance(rng, max_n=40)
        if correctness.all() or not correctness.any():
            continue
        assert abs(auroc(scores, correctness) - brute_force_auroc(scores, correctness)) < 1e-12


def test_auroc_requires_both_classes():
    with pytest.raises(ValueError, match="both"):
        auroc(np.array([0.1, 0.2]), np.array([True, True]))


def test_monotone_transform_leaves_selection_unchanged():
    rng = np.random.default_rng(6)
    transform = lambda x: x**3 + x
    for _ in range(50):
        scores, correctness = random_instance(rng)
        mapped = transform(scores)
        curve_a = risk_coverage_curve(scores, correctness)
        curve_b = risk_coverage_curve(mapped, correctness)
        assert curve_a.coverages.tolist() == curve_b.coverages.tolist()
        assert curve_a.errors.tolist() == curve_b.errors.tolist()
        for target in (0.0, 0.1, 0.4):
            _, res_a = calibrate_for_error(scores, correctness, target)
            _, res_b = calibrate_for_error(mapped, correctness, target)
            assert res_a.accept_mask.tolist() == res_b.accept_mask.tolist()
        for target in (0.3, 0.8, 1.0):
            _, res_a = calibrate_for_coverage(scores, target)
            _, res_b = calibrate_for_coverage(mapped, target)
            assert res_a.accept_mask.tolist() == res_b.accept_mask.tolist()


def test_curve_csv_roundtrip(tmp_path):
    scores = np.array([0.4, 0.1, 0.9])
    curve = risk_coverage_curve(scores, np.array([True, False, True]))
    path = tmp_path / "curve.csv"
    write_curve_csv(curve, path)
    loaded = read_curve_csv(path)
    assert loaded.thresholds.tolist() == curve.thresholds.tolist()
    assert loaded.coverages.tolist() == curve.coverages.tolist()
    assert loaded.errors.tolist() == curve.errors.tolist()
    assert loaded.thresholds[0] == -math.inf
