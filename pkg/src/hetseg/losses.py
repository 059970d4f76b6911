"""Per-image training objectives.

Every loss takes softmax posteriors shaped ``(K, H, W)`` (K = C + 1, class
axis first) and returns the pixel-mean loss together with its gradient with
respect to the *logits* that produced those posteriors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hetseg.labelspace import (
    BACKGROUND,
    AnnotationProtocol,
    LabelError,
    LabelSpace,
    non_annotated,
)

PROB_FLOOR = 1e-12


@dataclass
class LossResult:
    loss: float
    grad_logits: np.ndarray


def _check_labels(posteriors: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if posteriors.ndim != 3 or labels.shape != posteriors.shape[1:]:
        raise ValueError(
            f"posteriors {posteriors.shape} and labels {labels.shape} are incompatible"
        )
    k = posteriors.shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"label values must lie in 0..{k - 1}")
    return labels.astype(np.intp, copy=False)


def _one_hot(labels: np.ndarray, k: int, dtype) -> np.ndarray:
    target = np.zeros((k,) + labels.shape, dtype=dtype)
    np.put_along_axis(target, labels[None], 1.0, axis=0)
    return target


def _mean_result(per_pixel: np.ndarray, posteriors: np.ndarray, target: np.ndarray) -> LossResult:
    n_pix = per_pixel.size
    grad = (posteriors - target) / n_pix
    return LossResult(float(per_pixel.mean()), grad)


def ce_loss(posteriors: np.ndarray, labels: np.ndarray) -> LossResult:
    """Pixel-mean cross entropy against a hard label map."""
    labels = _check_labels(posteriors, labels)
    p_true = np.take_along_axis(posteriors, labels[None], axis=0)[0]
    per_pixel = -np.log(np.maximum(p_true, PROB_FLOOR))
    target = _one_hot(labels, posteriors.shape[0], posteriors.dtype)
    return _mean_result(per_pixel, posteriors, target)


def ace_loss(
    posteriors: np.ndarray,
    labels: np.ndarray,
    proto: AnnotationProtocol,
    space: LabelSpace,
) -> LossResult:
    """Adaptive cross entropy under the annotation protocol ``proto``.

    Annotated pixels are scored like cross entropy. A background pixel only
    asks that the posterior mass on background plus the classes ``proto``
    does not annotate sums to one.
    """
    labels = _check_labels(posteriors, labels)
    if posteriors.shape[0] != space.num_classes + 1:
        raise ValueError(f"expected {space.num_classes + 1} posterior channels")
    allowed = np.zeros(space.num_classes + 1, dtype=bool)
    allowed[BACKGROUND] = True
    allowed[list(proto.annotated)] = True
    if not allowed[labels].all():
        bad = sorted(set(np.unique(labels)) - set(np.flatnonzero(allowed)))
        raise LabelError(
            f"labels {bad} are neither background nor annotated by database "
            f"{proto.database_id}; were the labels filtered through its protocol?"
        )

    in_bg_set = np.zeros((space.num_classes + 1, 1, 1), dtype=bool)
    in_bg_set[BACKGROUND] = True
    in_bg_set[sorted(non_annotated(proto, space))] = True
    bg_mass_terms = np.where(in_bg_set, posteriors, 0.0)
    # summing in sorted order makes the merged mass exactly invariant to
    # relabelling classes inside the merged set
    bg_mass = np.sort(bg_mass_terms, axis=0).sum(axis=0)

    is_bg = labels == BACKGROUND
    p_true = np.take_along_axis(posteriors, labels[None], axis=0)[0]
    per_pixel = -np.log(np.clip(np.where(is_bg, bg_mass, p_true), PROB_FLOOR, 1.0))

    target = _one_hot(labels, posteriors.shape[0], posteriors.dtype)
    tiny = np.finfo(posteriors.dtype).tiny
    spread = bg_mass_terms / np.maximum(bg_mass, tiny)
    target = np.where(is_bg[None], spread, target).astype(posteriors.dtype, copy=False)
    return _mean_result(per_pixel, posteriors, target)


def consistency_loss(student: np.ndarray, teacher: np.ndarray) -> LossResult:
    """Mean squared difference of posteriors over pixels and classes.

    The teacher is a constant; the gradient is taken through the student's
    softmax only.
    """
    if student.shape != teacher.shape:
        raise ValueError(f"student {student.shape} and teacher {teacher.shape} differ in shape")
    diff = student - teacher
    loss = float(np.mean(diff * diff))
    g_post = 2.0 * diff / diff.size
    grad = student * (g_post - (g_post * student).sum(axis=0, keepdims=True))
    return LossResult(loss, grad.astype(student.dtype, copy=False))


def consistency_weight(epoch: int, max_w: float = 1.0, ramp_start: int = 3,
                       ramp_len: int = 10) -> float:
    """Linear warm-up from zero at ``ramp_start`` to ``max_w`` over ``ramp_len`` epochs."""
    if max_w < 0:
        raise ValueError("max_w must be >= 0")
    if ramp_len < 1:
        raise ValueError("ramp_len must be >= 1")
    if epoch < ramp_start:
        return 0.0
    return max_w * min(1.0, (epoch - ramp_start) / ramp_len)
