import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eegprobe import (
    AggregateResult,
    ConfusionMatrix,
    MetricReport,
    aggregate,
    balanced_accuracy,
    cohen_kappa,
    confusion_matrix,
    delta,
    evaluate,
    macro_f1,
)


# -- independent brute-force oracle (plain Python, no confusion matrix) --------


def brute_balanced_accuracy(y_true, y_pred):
    classes = sorted(set(y_true))
    recalls = []
    for k in classes:
        hits = sum(1 for t, p in zip(y_true, y_pred) if t == k and p == k)
        total = sum(1 for t in y_true if t == k)
        recalls.append(hits / total)
    return sum(recalls) / len(recalls)


def brute_macro_f1(y_true, y_pred):
    classes = sorted(set(y_true) | set(y_pred))
    scores = []
    for k in classes:
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == k and p == k)
        pred_k = sum(1 for p in y_pred if p == k)
        true_k = sum(1 for t in y_true if t == k)
        precision = tp / pred_k if pred_k else 0.0
        recall = tp / true_k if true_k else 0.0
        scores.append(2 * precision * recall / (precision + recall) if precision + recall else 0.0)
    return sum(scores) / len(scores)


def brute_kappa(y_true, y_pred, n_classes):
    n = len(y_true)
    p_o = sum(1 for t, p in zip(y_true, y_pred) if t == p) / n
    p_e = 0.0
    for k in range(n_classes):
        p_e += (sum(1 for t in y_true if t == k) / n) * (sum(1 for p in y_pred if p == k) / n)
    return (p_o - p_e) / (1 - p_e)


# -- confusion matrix ----------------------------------------------------------


def test_confusion_perfect():
    cm = confusion_matrix([0, 1], [0, 1], 2)
    assert cm.counts.tolist() == [[1, 0], [0, 1]]


def test_confusion_worked_example():
    cm = confusion_matrix([0, 0, 1, 1], [0, 1, 1, 1], 2)
    assert cm.counts.tolist() == [[1, 1], [0, 2]]
    assert cm.row_sums().tolist() == [2, 2]


def test_confusion_index_out_of_range():
    with pytest.raises(ValueError):
        confusion_matrix([0, 3], [0, 1], 2)


def test_confusion_length_mismatch():
    with pytest.raises(ValueError, match="length mismatch"):
        confusion_matrix([0, 1, 0], [0, 1], 2)


def test_confusion_matrix_type_checks():
    with pytest.raises(ValueError, match="square"):
        ConfusionMatrix(np.zeros((2, 3)))
    with pytest.raises(ValueError, match=">= 0"):
        ConfusionMatrix(np.array([[1, -1], [0, 0]]))


# -- the three metrics ----------------------------------------------------------


def test_balanced_accuracy_perfect():
    cm = confusion_matrix([0, 1, 2], [0, 1, 2], 3)
    assert balanced_accuracy(cm) == 1.0


def test_balanced_accuracy_worked_example():
    cm = confusion_matrix([0, 0, 1, 1], [0, 1, 1, 1], 2)
    assert balanced_accuracy(cm) == pytest.approx(0.75, abs=1e-12)


def test_balanced_accuracy_constant_prediction():
    cm = confusion_matrix([0, 0, 1, 1], [0, 0, 0, 0], 2)
    assert balanced_accuracy(cm) == pytest.approx(0.5, abs=1e-12)


def test_balanced_accuracy_all_zero_matrix():
    with pytest.raises(ValueError):
        balanced_accuracy(ConfusionMatrix(np.zeros((2, 2), dtype=int)))


def test_macro_f1_worked_example():
    cm = confusion_matrix([0, 0, 1, 1], [0, 1, 1, 1], 2)
    assert macro_f1(cm) == pytest.approx((2 / 3 + 0.8) / 2, abs=1e-12)


def test_macro_f1_never_predicted_class_contributes_zero():
    # class 1 present in y_true, never predicted -> F1 contribution 0
    cm = confusion_matrix([0, 0, 1], [0, 0, 0], 2)
    assert macro_f1(cm) == pytest.approx(0.5 * (2 * (2 / 3) / (2 / 3 + 1)), abs=1e-12)


def test_macro_f1_absent_class_excluded():
    # class 2 absent from both sides of a 3-class problem
    cm = confusion_matrix([0, 0, 1, 1], [0, 1, 1, 1], 3)
    two_class = confusion_matrix([0, 0, 1, 1], [0, 1, 1, 1], 2)
    assert macro_f1(cm) == pytest.approx(macro_f1(two_class), abs=1e-15)


def test_cohen_kappa_perfect():
    cm = confusion_matrix([0, 1, 0, 1], [0, 1, 0, 1], 2)
    assert cohen_kappa(cm) == pytest.approx(1.0, abs=1e-12)


def test_cohen_kappa_worked_example():
    cm = confusion_matrix([0, 0, 1, 1], [0, 1, 1, 1], 2)
    assert cohen_kappa(cm) == pytest.approx(0.5, abs=1e-12)


def test_cohen_kappa_independent_predictions_near_zero(rng):
    y_true = rng.integers(0, 3, size=20000)
    y_pred = rng.integers(0, 3, size=20000)
    cm = confusion_matrix(y_true, y_pred, 3)
    assert abs(cohen_kappa(cm)) <= 0.05


def test_cohen_kappa_degenerate_single_cell():
    cm = confusion_matrix([0, 0, 0], [0, 0, 0], 2)
    with pytest.raises(ValueError, match="undefined kappa"):
        cohen_kappa(cm)


def test_metrics_match_brute_force_many_random_instances(rng):
    for _ in range(1000):
        n_classes = int(rng.integers(2, 7))
        n = int(rng.integers(2, 51))
        y_true = rng.integers(0, n_classes, size=n)
        if len(set(y_true.tolist())) < 2:
            y_true[0], y_true[1] = 0, 1
        y_pred = rng.integers(0, n_classes, size=n)
        cm = confusion_matrix(y_true, y_pred, n_classes)
        assert balanced_accuracy(cm) == pytest.approx(
            brute_balanced_accuracy(y_true.tolist(), y_pred.tolist()), abs=1e-12
        )
        assert macro_f1(cm) == pytest.approx(
            brute_macro_f1(y_true.tolist(), y_pred.tolist()), abs=1e-12
        )
        assert cohen_kappa(cm) == pytest.approx(
            brute_kappa(y_true.tolist(), y_pred.tolist(), n_classes), abs=1e-12
        )


@settings(max_examples=120, deadline=None)
@given(st.integers(2, 6), st.integers(2, 60), st.integers(0, 2**31 - 1))
def test_metric_ranges_property(n_classes, n, seed):
    gen = np.random.default_rng(seed)
    y_true = gen.integers(0, n_classes, size=n)
    y_pred = gen.integers(0, n_classes, size=n)
    cm = confusion_matrix(y_true, y_pred, n_classes)
    assert 0.0 <= balanced_accuracy(cm) <= 1.0
    assert 0.0 <= macro_f1(cm) <= 1.0
    try:
        kappa = cohen_kappa(cm)
    except ValueError:
        return
    assert -1.0 <= kappa <= 1.0 + 1e-15


@settings(max_examples=80, deadline=None)
@given(st.integers(2, 5), st.integers(4, 40), st.integers(0, 2**31 - 1))
def test_relabel_invariance(n_classes, n, seed):
    gen = np.random.default_rng(seed)
    y_true = gen.integers(0, n_classes, size=n)
    y_pred = gen.integers(0, n_classes, size=n)
    perm = gen.permutation(n_classes)
    cm = confusion_matrix(y_true, y_pred, n_classes)
    cm_perm = confusion_matrix(perm[y_true], perm[y_pred], n_classes)
    assert balanced_accuracy(cm) == pytest.approx(balanced_accuracy(cm_perm), abs=1e-12)
    assert macro_f1(cm) == pytest.approx(macro_f1(cm_perm), abs=1e-12)
    try:
        k0 = cohen_kappa(cm)
    except ValueError:
        return
    assert k0 == pytest.approx(cohen_kappa(cm_perm), abs=1e-12)


def test_balanced_accuracy_equals_accuracy_on_balanced_truth(rng):
    for _ in range(50):
        n_classes = int(rng.integers(2, 5))
        per_class = int(rng.integers(1, 10))
        y_true = np.repeat(np.arange(n_classes), per_class)
        y_pred = rng.integers(0, n_classes, size=y_true.size)
        cm = confusion_matrix(y_true, y_pred, n_classes)
        accuracy = np.mean(y_true == y_pred)
        assert abs(balanced_accuracy(cm) - accuracy) <= 1e-12


# -- aggregation and deltas -----------------------------------------------------


def _report(ba, f1, kappa):
    cm = confusion_matrix([0, 1], [0, 1], 2)
    return MetricReport(balanced_accuracy=ba, macro_f1=f1, cohen_kappa=kappa, confusion=cm)


def test_aggregate_single_report():
    agg = aggregate([_report(0.6, 0.5, 0.2)])
    assert agg.means["balanced_accuracy"] == 0.6
    assert agg.stds["balanced_accuracy"] == 0.0
    assert agg.n_runs == 1


def test_aggregate_two_values_population_std():
    agg = aggregate([_report(0.6, 0.6, 0.6), _report(0.8, 0.8, 0.8)])
    for name in ("balanced_accuracy", "macro_f1", "cohen_kappa"):
        assert agg.means[name] == pytest.approx(0.7, abs=1e-15)
        assert agg.stds[name] == pytest.approx(0.1, abs=1e-15)


def test_aggregate_identical_reports_zero_std():
    agg = aggregate([_report(0.45, 0.4, 0.1)] * 5)
    assert all(s == 0.0 for s in agg.stds.values())
    assert agg.n_runs == 5


def test_aggregate_empty_errors():
    with pytest.raises(ValueError, match="empty"):
        aggregate([])


def test_aggregate_accepts_plain_mappings():
    agg = aggregate([{"m": 1.0}, {"m": 3.0}])
    assert agg.means["m"] == 2.0
    assert agg.stds["m"] == 1.0


def test_delta_zero():
    a = _report(0.5, 0.5, 0.5)
    d = delta(a, a)
    assert all(v == 0.0 for v in d.deltas.values())
    assert all(tag == "flat" for tag in d.directions.values())


def test_delta_gain_and_loss():
    d = delta(_report(0.75, 0.5, 0.2), _report(0.60, 0.5, 0.3), "tuned", "default")
    assert d.deltas["balanced_accuracy"] == pytest.approx(0.15)
    assert d.directions["balanced_accuracy"] == "gain"
    assert d.deltas["cohen_kappa"] == pytest.approx(-0.1)
    assert d.directions["cohen_kappa"] == "loss"
    assert d.label_a == "tuned"


def test_delta_metric_set_mismatch():
    with pytest.raises(ValueError, match="metric set mismatch"):
        delta({"a": 1.0}, {"b": 1.0})


def test_delta_on_aggregates():
    a = aggregate([_report(0.6, 0.6, 0.6), _report(0.8, 0.8, 0.8)])
    b = aggregate([_report(0.5, 0.5, 0.5)])
    d = delta(a, b)
    assert d.deltas["macro_f1"] == pytest.approx(0.2)


def test_metric_report_dict():
    rep = evaluate([0, 0, 1, 1], [0, 1, 1, 1], 2)
    obj = rep.to_dict()
    assert obj["balanced_accuracy"] == 0.75
    assert obj["confusion"] == [[1, 1], [0, 2]]
    assert math.isclose(obj["macro_f1"], 11 / 15)


def test_aggregate_result_metric_mismatch():
    with pytest.raises(ValueError, match="metric set mismatch"):
        aggregate([{"a": 1.0}, {"b": 2.0}])


def test_aggregate_result_is_dataclass_roundtrip():
    agg = AggregateResult(means={"m": 0.5}, stds={"m": 0.1}, n_runs=3)
    assert agg.to_dict() == {"means": {"m": 0.5}, "stds": {"m": 0.1}, "n_runs": 3}
