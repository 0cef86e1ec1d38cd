import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_tc, set_miou
from ssp.errors import ContractError
from ssp.metrics import ConfusionMatrix, class_iou, confusion_accumulate, miou, tc_pair, tc_video


def test_perfect_prediction_is_diagonal(rng):
    lab = rng.integers(0, 4, (6, 6))
    cm = confusion_accumulate(ConfusionMatrix(4), lab, lab)
    assert np.count_nonzero(cm.counts - np.diag(np.diag(cm.counts))) == 0
    assert miou(cm) == 1.0


def test_all_invalid_leaves_matrix_unchanged(rng):
    cm = ConfusionMatrix(3)
    confusion_accumulate(cm, rng.integers(0, 3, (4, 4)), rng.integers(0, 3, (4, 4)), np.zeros((4, 4)))
    assert cm.total == 0


def test_hand_tally():
    t = np.array([[0, 0, 1], [1, 2, 2], [2, 2, 0]])
    p = np.array([[0, 1, 1], [1, 2, 0], [2, 1, 0]])
    cm = confusion_accumulate(ConfusionMatrix(3), t, p)
    expected = np.zeros((3, 3), int)
    for a, b in zip(t.ravel(), p.ravel()):
        expected[a, b] += 1
    np.testing.assert_array_equal(cm.counts, expected)


def test_ignore_index_skipped():
    t = np.array([[0, 255], [1, 1]])
    p = np.array([[0, 1], [1, 0]])
    cm = confusion_accumulate(ConfusionMatrix(2), t, p)
    assert cm.total == 3


def test_miou_arithmetic():
    cm = ConfusionMatrix(2)
    cm.counts[:] = [[3, 1], [0, 4]]  # IoU0 = 3/4, IoU1 = 4/5
    np.testing.assert_allclose(class_iou(cm), [0.75, 0.8])
    assert miou(cm) == pytest.approx(0.775)


def test_absent_classes_excluded():
    cm = confusion_accumulate(ConfusionMatrix(5), np.array([[0, 1]]), np.array([[0, 1]]))
    assert np.isnan(class_iou(cm)[2:]).all()
    assert miou(cm) == 1.0


def test_empty_matrix_rejected():
    with pytest.raises(ContractError):
        miou(ConfusionMatrix(3))


def test_out_of_range_rejected():
    with pytest.raises(ContractError):
        confusion_accumulate(ConfusionMatrix(2), np.array([[0, 2]]), np.array([[0, 1]]))


def test_miou_matches_set_oracle(rng):
    for _ in range(50):
        t = rng.integers(0, 3, (8, 8))
        p = rng.integers(0, 3, (8, 8))
        assert abs(miou(confusion_accumulate(ConfusionMatrix(3), t, p)) - set_miou(t, p, 3)) < 1e-9


def test_confusion_merge_is_additive(rng):
    a = [rng.integers(0, 3, (5, 5)) for _ in range(4)]
    cm1 = confusion_accumulate(ConfusionMatrix(3), a[0], a[1])
    cm2 = confusion_accumulate(ConfusionMatrix(3), a[2], a[3])
    both = confusion_accumulate(confusion_accumulate(ConfusionMatrix(3), a[0], a[1]), a[2], a[3])
    np.testing.assert_array_equal((cm1 + cm2).counts, both.counts)


@settings(max_examples=40, deadline=None)
@given(arrays(np.int64, (6, 6), elements=st.integers(0, 3)), arrays(np.int64, (6, 6), elements=st.integers(0, 3)),
       st.permutations(range(4)))
def test_miou_permutation_invariant_and_bounded(t, p, perm):
    perm = np.array(perm)
    a = miou(confusion_accumulate(ConfusionMatrix(4), t, p))
    b = miou(confusion_accumulate(ConfusionMatrix(4), perm[t], perm[p]))
    assert abs(a - b) < 1e-12
    assert 0.0 <= a <= 1.0


def test_tc_examples(rng):
    p = rng.integers(0, 3, (8, 8))
    assert tc_pair(p, p, np.zeros((2, 8, 8))) == 1.0
    one = np.zeros((8, 8), int)
    assert tc_pair(one, one, rng.uniform(-2, 2, (2, 8, 8))) == 1.0


def test_tc_flicker_matches_brute_force():
    prev = np.zeros((8, 8), int)
    prev[2:5, 2:5] = 1
    curr = prev.copy()
    curr[2:5, 2:5] = 2  # the region flips class between frames
    flow = np.zeros((2, 8, 8))
    tc = tc_pair(prev, curr, flow, 3)
    assert tc < 1
    assert abs(tc - brute_tc(prev, curr, flow, 3)) < 1e-9


def test_tc_matches_brute_force_random(rng):
    for _ in range(30):
        prev = rng.integers(0, 3, (8, 8))
        curr = rng.integers(0, 3, (8, 8))
        flow = rng.uniform(-2.5, 2.5, (2, 8, 8))
        assert abs(tc_pair(prev, curr, flow, 3) - brute_tc(prev, curr, flow, 3)) < 1e-9


def test_tc_video(rng):
    preds = [rng.integers(0, 3, (8, 8)) for _ in range(5)]
    flows = [rng.uniform(-1, 1, (2, 8, 8)) for _ in range(4)]
    assert tc_video(preds[:2], flows[:1], 3) == tc_pair(preds[0], preds[1], flows[0], 3)
    expected = np.mean([tc_pair(a, b, f, 3) for a, b, f in zip(preds, preds[1:], flows)])
    assert abs(tc_video(preds, flows, 3) - expected) < 1e-12
    same = [preds[0]] * 4
    assert tc_video(same, [np.zeros((2, 8, 8))] * 3, 3) == 1.0


def test_tc_video_needs_two_frames():
    with pytest.raises(ContractError):
        tc_video([np.zeros((2, 2), int)], [])
