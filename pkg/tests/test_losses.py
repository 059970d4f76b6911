import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetseg.labelspace import AnnotationProtocol, LabelError, build_label_space, default_label_space
from hetseg.losses import ace_loss, ce_loss, consistency_loss, consistency_weight
from hetseg.netcore import softmax

SPACE = default_label_space()


def random_posteriors(rng, k=7, h=5, w=6, scale=3.0):
    return softmax(rng.normal(scale=scale, size=(k, h, w)), axis=0)


def one_pixel(values):
    return np.asarray(values, dtype=np.float64).reshape(-1, 1, 1)


def test_ce_closed_forms():
    assert ce_loss(one_pixel([0.0, 1.0]), np.array([[1]])).loss == 0.0
    assert ce_loss(one_pixel([0.5, 0.5]), np.array([[1]])).loss == pytest.approx(math.log(2))
    uniform = np.full((7, 4, 4), 1 / 7)
    labels = np.random.default_rng(0).integers(0, 7, (4, 4))
    assert ce_loss(uniform, labels).loss == pytest.approx(math.log(7), abs=1e-12)


def test_ce_gradient_formula():
    rng = np.random.default_rng(1)
    post = random_posteriors(rng)
    labels = rng.integers(0, 7, post.shape[1:])
    onehot = np.eye(7)[labels].transpose(2, 0, 1)
    np.testing.assert_allclose(ce_loss(post, labels).grad_logits, (post - onehot) / labels.size)


def test_ce_floor_keeps_loss_finite():
    res = ce_loss(one_pixel([1.0, 0.0]), np.array([[1]]))
    assert res.loss == pytest.approx(-math.log(1e-12))


def test_ce_label_out_of_range():
    with pytest.raises(LabelError):
        ce_loss(one_pixel([0.5, 0.5]), np.array([[2]]))


def test_ace_background_hand_case():
    space = build_label_space(["a", "b", "c"], ["overlapping"] * 3)
    proto = AnnotationProtocol(2, frozenset({1}))
    res = ace_loss(one_pixel([0.2, 0.3, 0.25, 0.25]), np.array([[0]]), proto, space)
    assert res.loss == pytest.approx(-math.log(0.7), abs=1e-12)
    assert res.loss == pytest.approx(0.3567, abs=1e-4)


def test_ace_lower_branch_gradient_formula():
    space = build_label_space(["a", "b", "c"], ["overlapping"] * 3)
    proto = AnnotationProtocol(2, frozenset({1}))
    f = np.array([0.2, 0.3, 0.25, 0.25])
    in_s = np.array([1.0, 0.0, 1.0, 1.0])
    expected = f - f * in_s / 0.7
    res = ace_loss(one_pixel(f), np.array([[0]]), proto, space)
    np.testing.assert_allclose(res.grad_logits.ravel(), expected, atol=1e-12)


def test_ace_annotated_pixel_at_optimum():
    proto = AnnotationProtocol(2, frozenset({1, 2, 3}))
    post = one_pixel([0, 0, 1.0, 0, 0, 0, 0])
    assert ace_loss(post, np.array([[2]]), proto, SPACE).loss == 0.0


def test_ace_rejects_unfiltered_labels():
    proto = AnnotationProtocol(2, frozenset({1, 2, 3}))
    post = random_posteriors(np.random.default_rng(0), h=2, w=2)
    with pytest.raises(LabelError):
        ace_loss(post, np.array([[0, 4], [1, 2]]), proto, SPACE)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ace_equals_ce_under_full_protocol(seed):
    rng = np.random.default_rng(seed)
    post = random_posteriors(rng)
    labels = rng.integers(0, 7, post.shape[1:])
    a = ace_loss(post, labels, SPACE.full_protocol(), SPACE)
    c = ce_loss(post, labels)
    assert a.loss == c.loss
    np.testing.assert_array_equal(a.grad_logits, c.grad_logits)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.frozensets(st.integers(1, 6)))
def test_ace_background_properties(seed, annotated):
    rng = np.random.default_rng(seed)
    proto = AnnotationProtocol(2, annotated)
    post = random_posteriors(rng, h=1, w=1)
    labels = np.zeros((1, 1), dtype=np.int64)
    value = ace_loss(post, labels, proto, SPACE).loss
    # monotone: never worse than plain CE against background
    assert value <= ce_loss(post, labels).loss + 1e-15
    assert value >= 0
    # invariant under permutations of the merged posteriors
    merged = [0] + sorted(set(range(1, 7)) - annotated)
    perm = rng.permutation(merged)
    shuffled = post.copy()
    shuffled[merged] = post[perm]
    assert ace_loss(shuffled, labels, proto, SPACE).loss == value


def test_ace_background_permutation_invariance_exact():
    rng = np.random.default_rng(5)
    proto = AnnotationProtocol(2, frozenset({1, 2, 3}))
    merged = [0, 4, 5, 6]
    for _ in range(100):
        post = random_posteriors(rng, h=1, w=1)
        base = ace_loss(post, np.zeros((1, 1), int), proto, SPACE).loss
        for perm in itertools.islice(itertools.permutations(merged), 1, 6):
            shuffled = post.copy()
            shuffled[merged] = post[list(perm)]
            assert ace_loss(shuffled, np.zeros((1, 1), int), proto, SPACE).loss == base


def test_consistency_examples():
    same = random_posteriors(np.random.default_rng(2))
    res = consistency_loss(same, same)
    assert res.loss == 0.0 and not res.grad_logits.any()
    assert consistency_loss(one_pixel([1.0, 0.0]), one_pixel([0.0, 1.0])).loss == 1.0


def test_consistency_symmetric_value():
    rng = np.random.default_rng(3)
    a, b = random_posteriors(rng), random_posteriors(rng)
    assert consistency_loss(a, b).loss == consistency_loss(b, a).loss
    assert not np.allclose(consistency_loss(a, b).grad_logits, consistency_loss(b, a).grad_logits)


def test_consistency_shape_mismatch():
    with pytest.raises(ValueError):
        consistency_loss(np.ones((7, 2, 2)) / 7, np.ones((7, 2, 3)) / 7)


def test_weight_schedule():
    assert consistency_weight(0) == 0.0
    assert consistency_weight(3) == 0.0
    assert consistency_weight(8) == 0.5
    assert consistency_weight(13) == 1.0
    assert consistency_weight(100) == 1.0
    assert all(consistency_weight(e, max_w=0.0) == 0.0 for e in range(50))


@given(st.floats(0, 10), st.integers(0, 20), st.integers(1, 30))
def test_weight_monotone_and_bounded(max_w, start, length):
    ws = [consistency_weight(e, max_w, start, length) for e in range(60)]
    assert all(b >= a for a, b in zip(ws, ws[1:]))
    assert all(0 <= w <= max_w for w in ws)
