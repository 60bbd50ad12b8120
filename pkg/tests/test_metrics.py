import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn import metrics as skm

from oracles import brute_force_auc
from vmd.metrics import UndefinedMetricError, compute_metrics, roc_auc, summarize


def test_worked_four_sample_example():
    labels = [1, 1, 0, 0]
    scores = [0.9, 0.4, 0.6, 0.1]
    assert brute_force_auc(scores, labels) == 0.75
    rep = compute_metrics(scores, labels)
    assert rep.roc_auc == 0.75
    assert (rep.tp, rep.fn, rep.fp, rep.tn) == (1, 1, 1, 1)
    assert rep.precision == rep.recall == rep.fbeta == 0.5
    assert rep.accuracy == 0.5


def test_perfect_separation():
    rep = compute_metrics([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
    assert rep.roc_auc == rep.accuracy == rep.precision == rep.recall == rep.fbeta == 1.0


def test_auc_matches_pair_counting_on_random_instances():
    rng = np.random.default_rng(11)
    for _ in range(100):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, n)
        labels[rng.choice(n, 2, replace=False)] = [0, 1]
        # coarse grid so ties are common
        scores = rng.integers(0, 8, n) / 7.0
        assert abs(roc_auc(scores, labels) - brute_force_auc(scores.tolist(), labels.tolist())) <= 1e-12


def _fbeta_from_counts(tp, fp, fn, beta):
    # count form, independent of the precision/recall route
    b2 = beta * beta
    den = (1 + b2) * tp + b2 * fn + fp
    return (1 + b2) * tp / den if den else 0.0


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=2, max_size=50),
    st.sampled_from([0.5, 1.0, 2.0]),
)
def test_consistency_identities(pairs, beta):
    scores = [p[0] for p in pairs]
    labels = [p[1] for p in pairs]
    rep = compute_metrics(scores, labels, beta=beta)
    cm = np.array(rep.confusion_matrix)
    assert cm.sum() == rep.n == len(pairs)
    assert rep.accuracy == (rep.tp + rep.tn) / rep.n
    if rep.tp + rep.fp:
        assert abs(rep.precision - rep.tp / (rep.tp + rep.fp)) <= 1e-12
    if rep.tp + rep.fn:
        assert abs(rep.recall - rep.tp / (rep.tp + rep.fn)) <= 1e-12
    assert abs(rep.fbeta - _fbeta_from_counts(rep.tp, rep.fp, rep.fn, beta)) <= 1e-12
    if 0 < sum(labels) < len(labels):
        assert abs(rep.roc_auc - skm.roc_auc_score(labels, scores)) <= 1e-12


def test_chance_level():
    rng = np.random.default_rng(5)
    labels = rng.integers(0, 2, 20000)
    scores = rng.random(20000)
    assert abs(roc_auc(scores, labels) - 0.5) < 0.015


def test_single_class_reports_other_metrics():
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.2, 0.7], [1, 1])
    rep = compute_metrics([0.2, 0.7], [1, 1])
    assert rep.roc_auc is None and rep.errors
    assert rep.recall == 0.5 and rep.precision == 1.0


@pytest.mark.parametrize(
    "scores,labels",
    [([], []), ([0.1], [0, 1]), ([0.1, 0.2], [0, 2]), ([np.nan, 0.2], [0, 1])],
)
def test_invalid_inputs(scores, labels):
    with pytest.raises(ValueError):
        compute_metrics(scores, labels)


def test_summarize_uses_sample_std():
    reps = [compute_metrics([0.9, 0.1], [1, 0]), compute_metrics([0.1, 0.9], [1, 0])]
    s = summarize(reps)
    assert s["roc_auc"]["mean"] == 0.5
    assert abs(s["roc_auc"]["std"] - np.std([1.0, 0.0], ddof=1)) <= 1e-15
