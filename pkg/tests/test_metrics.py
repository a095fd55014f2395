import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synthbalance.errors import EvaluationError
from synthbalance.metrics import (
    REFERENCE_ROWS,
    ConfusionCounts,
    auc,
    compare_report,
    confusion,
    evaluate,
    read_report,
    roc_curve,
    sensitivity,
)


def pairwise_auc(scores, labels):
    """Probability a random positive outranks a random negative, ties worth 1/2."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def test_confusion_hand_counted():
    labels = [1, 1, 1, 0, 0, 0, 0, 1, 0, 1]
    preds = [1, 0, 1, 0, 1, 0, 0, 0, 0, 1]
    c = confusion(labels, preds)
    assert c == ConfusionCounts(tp=3, fp=1, tn=4, fn=2)
    assert sensitivity(c) == pytest.approx(0.6)


def test_confusion_errors():
    with pytest.raises(EvaluationError):
        confusion([0, 1], [1])
    with pytest.raises(EvaluationError):
        sensitivity(ConfusionCounts(0, 3, 4, 0))


def test_roc_with_ties_is_single_diagonal_step():
    curve = roc_curve([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0])
    assert curve.fpr == (0.0, 1.0, 1.0)
    assert curve.tpr == (0.0, 1.0, 1.0)
    assert auc(curve) == 0.5


def test_roc_perfect_and_inverted():
    assert auc(roc_curve([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])) == 1.0
    assert auc(roc_curve([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0])) == 0.0


def test_roc_needs_both_classes():
    with pytest.raises(EvaluationError):
        roc_curve([0.1, 0.2], [1, 1])


def test_roc_thresholds_have_sentinels():
    curve = roc_curve([0.3, 0.7, 0.1], [0, 1, 0])
    assert curve.thresholds[0] == pytest.approx(1.7)
    assert curve.thresholds[-1] == pytest.approx(-0.9)
    assert list(curve.fpr) == sorted(curve.fpr)
    assert list(curve.tpr) == sorted(curve.tpr)


@settings(max_examples=200, deadline=None)
@given(
    data=st.lists(st.tuples(st.integers(0, 6), st.integers(0, 1)), min_size=2, max_size=60),
)
def test_auc_matches_pairwise_oracle(data):
    scores = [s / 6 for s, _ in data]
    labels = [y for _, y in data]
    if len(set(labels)) < 2:
        return
    assert auc(roc_curve(scores, labels)) == pytest.approx(pairwise_auc(scores, labels), abs=1e-12)


def test_evaluate_threshold_tie_is_malignant():
    r = evaluate(["a", "b", "c"], [0.5, 0.2, 0.9], [1, 0, 0], threshold=0.5)
    assert r.counts == ConfusionCounts(tp=1, fp=1, tn=1, fn=0)


def test_report_round_trip(tmp_path):
    r = evaluate(["a", "b", "c", "d"], [0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0], method="m", config_fingerprint="abc")
    json_path, roc_path = r.write(tmp_path)
    back = read_report(json_path)
    assert back.counts == r.counts and back.auc == r.auc and back.roc == r.roc
    assert back.per_sample_scores == r.per_sample_scores
    assert roc_path.read_text().splitlines()[0] == "fpr,tpr,threshold"
    assert json.loads(json_path.read_text())["method"] == "m"


def test_compare_report_rows_and_reference():
    r = evaluate(["a", "b", "c", "d"], [0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0], method="mine")
    table = compare_report([r], include_reference=True)
    assert table.rows[0] == ("mine", 75.0, 50.0, 1)
    assert table.rows[1:] == list(REFERENCE_ROWS)
    assert ("MelaNet (reference)", 81.18, 91.76, 22) in table.rows
    csv_text = table.to_csv()
    assert csv_text.splitlines()[1] == "mine,75.00,50.00,1"
    assert "mine" in table.render()
    assert table.roc_csv().splitlines()[0] == "method,fpr,tpr"
