import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from helpers import random_instance
from forgeryloc.metrics import (TIOU_GRID, MetricError, auc, average_precision,
                                average_recall_at_n, confusion_metrics, eer, mean_ap,
                                pfd_report, tfl_report, tiou)


# --- TIoU ---------------------------------------------------------------------

def test_tiou_examples():
    assert tiou((1.0, 2.0), (1.0, 2.0)) == 1.0
    assert tiou((0.0, 1.0), (2.0, 1.0)) == 0.0
    assert tiou((0.0, 2.0), (1.0, 2.0)) == pytest.approx(1 / 3)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 10), st.floats(0.01, 5), st.floats(0, 10), st.floats(0.01, 5))
def test_tiou_symmetric_and_bounded(s0, d0, s1, d1):
    a, b = tiou((s0, d0), (s1, d1)), tiou((s1, d1), (s0, d0))
    assert a == pytest.approx(b)
    assert 0.0 <= a <= 1.0
    assert a == pytest.approx(oracles.tiou((s0, d0), (s1, d1)))


# --- EER and AUC -----------------------------------------------------------------

def test_eer_examples():
    s = [0.9, 0.8, 0.6, 0.7, 0.2, 0.1]
    y = [1, 1, 1, 0, 0, 0]
    assert eer(s, y)[0] == pytest.approx(1 / 3)
    assert eer([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])[0] == 0.0


def test_eer_label_flip_symmetry(rng):
    s = rng.random(50)
    y = (rng.random(50) < 0.4).astype(int)
    y[:2] = [0, 1]
    assert eer(s, y)[0] == pytest.approx(eer(1 - s, 1 - y)[0], abs=1e-12)


def test_single_class_raises():
    with pytest.raises(MetricError):
        eer([0.1, 0.2], [1, 1])
    with pytest.raises(MetricError):
        auc([0.1, 0.2], [0, 0])


def test_auc_examples():
    assert auc([0.9, 0.8, 0.2], [1, 1, 0]) == 1.0
    assert auc([0.5] * 4, [1, 0, 1, 0]) == 0.5
    assert auc([0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0]) == pytest.approx(0.75)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 1)), min_size=2, max_size=40))
def test_auc_matches_pair_count_with_ties(rows):
    s = [v / 20 for v, _ in rows]
    y = [c for _, c in rows]
    if len(set(y)) < 2:
        return
    assert auc(s, y) == pytest.approx(oracles.auc(s, y), abs=1e-12)


def test_eer_auc_match_oracle_tie_free(rng):
    for _ in range(100):
        n = int(rng.integers(4, 40))
        s = rng.random(n)
        y = (rng.random(n) < 0.5).astype(int)
        y[:2] = [0, 1]
        assert eer(s, y)[0] == pytest.approx(oracles.eer(list(s), list(y)), abs=1e-9)
        assert auc(s, y) == pytest.approx(oracles.auc(list(s), list(y)), abs=1e-12)


def test_confusion_metrics_hand_case():
    fpr, fnr, p, r, f1 = confusion_metrics([0.9, 0.6, 0.4, 0.7, 0.1], [1, 1, 1, 0, 0], 0.5)
    assert (fpr, fnr) == (0.5, pytest.approx(1 / 3))
    assert p == pytest.approx(2 / 3) and r == pytest.approx(2 / 3) and f1 == pytest.approx(2 / 3)
    assert confusion_metrics([0.1, 0.2], [1, 0])[2:] == (0.0, 0.0, 0.0)


def test_pfd_report_oracle_input():
    y = np.array([0, 0, 1, 1, 1, 0])
    rep = pfd_report(y.astype(float), y)
    assert rep.eer == 0.0 and rep.auc == 1.0 and rep.f1 == 1.0


# --- AP, mAP, AR -----------------------------------------------------------------

def test_ap_examples():
    gts = {"a": [(1.0, 1.0)]}
    assert average_precision({"a": [(1.0, 1.0, 0.9)]}, gts, 0.5) == 1.0
    assert average_precision({"a": [(3.0, 1.0, 0.9)]}, gts, 0.5) == 0.0
    miss_then_hit = {"a": [(1.7, 1.0, 0.9), (1.0, 0.8, 0.5)]}
    assert tiou((1.7, 1.0), (1.0, 1.0)) < 0.5 and tiou((1.0, 0.8), (1.0, 1.0)) >= 0.5
    assert average_precision(miss_then_hit, gts, 0.5) == pytest.approx(0.5)


def test_ap_empty_conventions():
    assert average_precision({"a": []}, {"a": []}, 0.5) == 1.0
    assert average_precision({"a": [(0, 1, 0.5)]}, {"a": []}, 0.5) == 0.0
    assert mean_ap({"a": []}, {"a": [(0, 1)]}) == 0.0


def test_map_is_mean_of_grid_aps(rng):
    props, gts = random_instance(rng, n_clips=4)
    aps = [average_precision(props, gts, t) for t in TIOU_GRID]
    assert mean_ap(props, gts) == pytest.approx(np.mean(aps), abs=1e-12)


def test_exact_proposals_score_one():
    gts = {"a": [(0.2, 0.4), (1.0, 0.3)], "b": [(0.5, 1.5)]}
    props = {c: [(s, d, 0.9) for s, d in g] for c, g in gts.items()}
    rep = tfl_report(props, gts)
    assert rep.map_score == 1.0 and rep.ar_at_n[20] == 1.0


def test_ar_examples():
    gts = {"a": [(0.0, 1.0), (2.0, 1.0)]}
    props = {"a": [(0.0, 1.0, 0.9), (2.0, 1.0, 0.5)]}
    assert average_recall_at_n(props, gts, 1) == pytest.approx(0.5)
    assert average_recall_at_n(props, gts, 2) == 1.0
    assert average_recall_at_n(props, gts, 0) == 0.0


def test_proposals_never_match_other_clips():
    gts = {"a": [(0.0, 1.0)], "b": []}
    assert average_precision({"a": [], "b": [(0.0, 1.0, 0.9)]}, gts, 0.5) == 0.0


def test_one_to_one_matching():
    gts = {"a": [(0.0, 1.0)]}
    props = {"a": [(0.0, 1.0, 0.9), (0.0, 1.0, 0.8)]}
    assert average_precision(props, gts, 0.5) == 1.0
    assert average_recall_at_n(props, gts, 20) == 1.0
    # the duplicate is a false positive: precision falls to 1/2 at the second rank
    gts2 = {"a": [(0.0, 1.0), (5.0, 1.0)]}
    assert average_precision(props, gts2, 0.5) == pytest.approx(0.5)


def test_metrics_match_oracles_on_random_instances(rng):
    for _ in range(100):
        props, gts = random_instance(rng)
        for t in (0.5, 0.75, 0.95):
            assert average_precision(props, gts, t) == pytest.approx(
                oracles.average_precision(props, gts, t), abs=1e-9)
        assert mean_ap(props, gts) == pytest.approx(
            oracles.mean_ap(props, gts, TIOU_GRID), abs=1e-9)
        for n in (1, 2, 5):
            assert average_recall_at_n(props, gts, n) == pytest.approx(
                oracles.average_recall(props, gts, n, TIOU_GRID), abs=1e-9)


def test_report_json_layout():
    rep = tfl_report({"a": [(0.0, 1.0, 0.9)]}, {"a": [(0.0, 1.0)]}).to_json()
    assert set(rep) == {"ap_at", "map", "ar_at_n", "tiou_grid"}
    assert "0.50" in rep["ap_at"] and "0.95" in rep["ap_at"] and "20" in rep["ar_at_n"]
