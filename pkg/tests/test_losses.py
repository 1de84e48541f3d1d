import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from hresformer.losses import (DICE_EPS, ce_loss, deep_supervised_loss, dice_loss,
                               downsample_labels, dsc_metric, supervision_weights)
from hresformer.model import PredictionPyramid
from hresformer.tensor import Tensor


def _t(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def _hard_logits(labels, k, margin=1e4):
    return np.eye(k)[labels] * margin


# -- cross-entropy --------------------------------------------------------------------------
def test_ce_uniform_is_log_k(f64, rng):
    labels = rng.integers(0, 5, (3, 4))
    assert ce_loss(_t(np.zeros((3, 4, 5))), labels).item() == pytest.approx(math.log(5), abs=1e-15)


def test_ce_saturated_is_zero(f64, rng):
    labels = rng.integers(0, 3, (4, 4))
    assert ce_loss(_t(_hard_logits(labels, 3)), labels).item() == pytest.approx(0.0, abs=1e-12)


def test_ce_two_voxel_hand_case(f64):
    logits = np.array([[2.0, -1.0], [0.5, 0.25]])
    labels = np.array([0, 1])
    p0 = math.exp(2) / (math.exp(2) + math.exp(-1))
    p1 = math.exp(0.25) / (math.exp(0.5) + math.exp(0.25))
    want = -(math.log(p0) + math.log(p1)) / 2
    assert abs(ce_loss(_t(logits), labels).item() - want) <= 1e-12


def test_ce_matches_direct_sum(f64, rng):
    logits = 3 * rng.standard_normal((2, 3, 4, 4))
    labels = rng.integers(0, 4, (2, 3, 4))
    got = ce_loss(_t(logits), labels).item()
    want = oracles.ce_direct(logits.reshape(-1, 4), labels.reshape(-1))
    assert abs(got - want) <= 1e-12


def test_ce_errors(f64):
    with pytest.raises(ValueError):
        ce_loss(_t(np.zeros((2, 3))), np.array([0, 3]))
    with pytest.raises(ValueError):
        ce_loss(_t(np.zeros((2, 3))), np.array([0, 1, 2]))
    with pytest.raises(ValueError):
        dice_loss(_t(np.zeros((2, 3))), np.array([-1, 0]))


# -- soft Dice ------------------------------------------------------------------------------
def test_dice_hard_correct_is_zero(f64, rng):
    labels = rng.integers(0, 3, (4, 5))
    assert dice_loss(_t(_hard_logits(labels, 3)), labels).item() == pytest.approx(0.0, abs=1e-12)


def test_dice_disjoint_is_one(f64):
    labels = np.array([1, 1, 0, 0])
    wrong = np.array([0, 0, 1, 1])
    loss = dice_loss(_t(_hard_logits(wrong, 2)), labels).item()
    assert loss == pytest.approx(1.0 - DICE_EPS / (4 + DICE_EPS), abs=1e-15)


def test_dice_half_probability_half_foreground(f64):
    n = 16
    labels = np.array([1] * (n // 2) + [0] * (n // 2))
    loss = dice_loss(_t(np.zeros((n, 2))), labels).item()
    # loop over voxels, independent of the vectorised sums
    inter = sum(0.5 * (y == 1) for y in labels)
    psum = sum(0.5 for _ in labels)
    gsum = sum(int(y == 1) for y in labels)
    want = 1 - (2 * inter + DICE_EPS) / (psum + gsum + DICE_EPS)
    assert abs(loss - want) <= 1e-15
    assert loss == pytest.approx(0.5, abs=1e-5)


def test_dice_at_hard_probabilities_matches_set_overlap(f64, rng):
    k = 4
    true = rng.integers(0, k, (3, 5, 5))
    pred = rng.integers(0, k, (3, 5, 5))
    got = dice_loss(_t(_hard_logits(pred, k)), true).item()
    terms = []
    for c in range(1, k):
        inter, n_p, n_g = oracles.overlap_counts(pred, true, c)
        terms.append((2 * inter + DICE_EPS) / (n_p + n_g + DICE_EPS))
    assert abs(got - (1 - sum(terms) / (k - 1))) <= 1e-15


def test_loss_ranges(f64, rng):
    for _ in range(5):
        logits = 4 * rng.standard_normal((6, 6, 3))
        labels = rng.integers(0, 3, (6, 6))
        assert ce_loss(_t(logits), labels).item() >= 0
        assert 0 <= dice_loss(_t(logits), labels).item() <= 1 + 1e-6


# -- deep supervision -----------------------------------------------------------------------
def _pyramid(labels, k, rng=None):
    outs = []
    for i in range(4):
        shape = tuple(max(n >> i, 1) for n in labels.shape)
        lab = downsample_labels(labels, shape)
        logits = _hard_logits(lab, k) if rng is None else rng.standard_normal(shape + (k,))
        outs.append(_t(logits[None]))
    return PredictionPyramid(outs, outs, outs)


def test_supervision_weights():
    w = supervision_weights()
    assert np.allclose(w, np.array([1, 0.5, 0.25, 0.125]) / 1.875)
    assert w.sum() == pytest.approx(1.0)


def test_perfect_pyramid_has_zero_loss(f64, rng):
    labels = rng.integers(0, 3, (4, 16, 16))
    assert deep_supervised_loss(_pyramid(labels, 3), labels).total.item() == pytest.approx(0, abs=1e-10)


def test_weight_scaling_is_linear(f64, rng):
    labels = rng.integers(0, 3, (4, 8, 8))
    pyr = _pyramid(labels, 3, rng)
    w = supervision_weights()
    one = deep_supervised_loss(pyr, labels, w).total.item()
    two = deep_supervised_loss(pyr, labels, 2 * w).total.item()
    assert two == pytest.approx(2 * one, rel=1e-14)


def test_report_recomputation(f64, rng):
    labels = rng.integers(0, 3, (4, 8, 8))
    report = deep_supervised_loss(_pyramid(labels, 3, rng), labels)
    assert len(report.components) == 8
    # 16 scalars: one CE and one Dice per output
    assert report.recompute() == pytest.approx(report.total.item(), rel=1e-13)


def test_downsample_labels_nearest():
    labels = np.arange(16).reshape(4, 4)
    assert np.array_equal(downsample_labels(labels, (2, 2)), np.array([[5, 7], [13, 15]]))
    assert np.array_equal(downsample_labels(labels, (4, 4)), labels)


# -- hard DSC -------------------------------------------------------------------------------
def test_dsc_examples():
    a = np.zeros(400, dtype=np.uint8)
    b = np.zeros(400, dtype=np.uint8)
    a[:100] = 1
    b[50:150] = 1
    assert dsc_metric(a, b, 2)[1] == 0.5
    assert dsc_metric(a, a, 2)[1] == 1.0
    c = np.zeros(400, dtype=np.uint8)
    c[200:300] = 1
    assert dsc_metric(a, c, 2)[1] == 0.0


def test_dsc_absent_class_scores_one():
    a = np.array([0, 1, 1, 0])
    per, mean = dsc_metric(a, a.copy(), 3)
    assert per == [1.0, 1.0] and mean == 1.0


def test_dsc_shape_mismatch():
    with pytest.raises(ValueError):
        dsc_metric(np.zeros(3), np.zeros(4), 2)


@given(arrays(np.uint8, (3, 4, 5), elements=st.integers(0, 3)),
       arrays(np.uint8, (3, 4, 5), elements=st.integers(0, 3)))
@settings(max_examples=50, deadline=None)
def test_dsc_matches_set_overlap(pred, true):
    per, mean = dsc_metric(pred, true, 4)
    want = [oracles.dice_counts(pred, true, c) for c in range(1, 4)]
    assert per == want
    assert mean == float(np.mean(want))
    assert dsc_metric(true, pred, 4) == (per, mean)
    assert dsc_metric(pred, pred, 4)[1] == 1.0
    assert all(0.0 <= v <= 1.0 for v in per)
