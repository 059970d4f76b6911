import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hetseg.labelspace import (
    DEFAULT_CLASS_NAMES,
    AnnotationProtocol,
    LabelError,
    build_label_space,
    default_label_space,
    non_annotated,
    relabel_to_protocol,
)

SPACE = default_label_space()
protocols = st.frozensets(st.integers(1, 6)).map(lambda s: AnnotationProtocol(2, s))
label_maps = arrays(np.uint8, (6, 7), elements=st.integers(0, 6))


def test_default_space():
    space = build_label_space(list(DEFAULT_CLASS_NAMES), ["overlapping"] * 3 + ["non_overlapping"] * 3)
    assert space.num_classes == 6
    assert space == SPACE
    assert space.group_members("overlapping") == (1, 2, 3)
    assert space.group_members("non_overlapping") == (4, 5, 6)


def test_minimal_space():
    space = build_label_space(["Organ"], ["overlapping"])
    assert space.num_classes == 1
    assert space.classes == frozenset({1})


@pytest.mark.parametrize("names, groups", [
    ([], []),
    (["a", "a"], ["overlapping", "overlapping"]),
    (["a", ""], ["overlapping", "overlapping"]),
    (["a", "b"], ["overlapping"]),
    (["a"], ["sideways"]),
])
def test_invalid_spaces(names, groups):
    with pytest.raises(LabelError):
        build_label_space(names, groups)


def test_protocol_rejects_background_and_negative():
    with pytest.raises(LabelError):
        AnnotationProtocol(1, frozenset({0, 1}))
    with pytest.raises(LabelError):
        AnnotationProtocol(1, frozenset({-2}))


def test_non_annotated():
    assert non_annotated(AnnotationProtocol(2, frozenset({1, 2, 3})), SPACE) == {4, 5, 6}
    assert non_annotated(SPACE.full_protocol(), SPACE) == frozenset()
    assert non_annotated(AnnotationProtocol(3, frozenset()), SPACE) == SPACE.classes


def test_protocol_beyond_space():
    with pytest.raises(LabelError):
        non_annotated(AnnotationProtocol(2, frozenset({7})), SPACE)


def test_relabel_examples():
    full = np.arange(7, dtype=np.uint8).repeat(3).reshape(3, 7)
    out = relabel_to_protocol(full, AnnotationProtocol(2, frozenset({1, 2, 3})), SPACE)
    expected = np.where(full >= 4, 0, full)
    np.testing.assert_array_equal(out, expected)
    np.testing.assert_array_equal(relabel_to_protocol(full, SPACE.full_protocol(), SPACE), full)
    zeros = np.zeros((4, 4), np.uint8)
    np.testing.assert_array_equal(
        relabel_to_protocol(zeros, AnnotationProtocol(2, frozenset({5})), SPACE), zeros)


def test_relabel_out_of_range():
    with pytest.raises(LabelError):
        relabel_to_protocol(np.array([[7]], dtype=np.uint8), SPACE.full_protocol(), SPACE)


@given(label_maps, protocols)
def test_relabel_properties(m, proto):
    once = relabel_to_protocol(m, proto, SPACE)
    assert np.array_equal(relabel_to_protocol(once, proto, SPACE), once)
    assert set(np.unique(once)) <= {0} | set(proto.annotated)
    for c in proto.annotated:
        assert np.array_equal(once == c, m == c)


@settings(max_examples=50)
@given(label_maps, protocols, protocols)
def test_relabel_background_grows_as_protocol_shrinks(m, p, q):
    small = AnnotationProtocol(2, p.annotated & q.annotated)
    bigger = AnnotationProtocol(2, p.annotated | q.annotated)
    n_small = int((relabel_to_protocol(m, small, SPACE) == 0).sum())
    n_big = int((relabel_to_protocol(m, bigger, SPACE) == 0).sum())
    assert n_small >= n_big


@given(protocols)
def test_partition(proto):
    rest = non_annotated(proto, SPACE)
    assert rest | proto.annotated == SPACE.classes
    assert not rest & proto.annotated
