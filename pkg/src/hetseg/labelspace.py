"""Total and per-database label sets.

Index 0 is always the background. Structure classes occupy 1..C, so a model
over a space of C classes emits C + 1 channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BACKGROUND = 0
GROUPS = ("overlapping", "non_overlapping")

DEFAULT_CLASS_NAMES = ("Bladder", "Rectum", "Uterus", "Bones", "FemHeadL", "FemHeadR")
DEFAULT_GROUPS = ("overlapping",) * 3 + ("non_overlapping",) * 3


class LabelError(ValueError):
    """Raised for malformed label spaces, protocols or label maps."""


@dataclass(frozen=True)
class LabelSpace:
    class_names: tuple[str, ...]
    groups: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.class_names:
            raise LabelError("label space needs at least one class")
        if len(self.groups) != len(self.class_names):
            raise LabelError(
                f"got {len(self.class_names)} class names but {len(self.groups)} group tags"
            )
        seen = set()
        for name in self.class_names:
            if not isinstance(name, str) or not name.strip():
                raise LabelError("class names must be non-empty strings")
            if name in seen:
                raise LabelError(f"duplicate class name {name!r}")
            seen.add(name)
        for g in self.groups:
            if g not in GROUPS:
                raise LabelError(f"unknown group tag {g!r}; expected one of {GROUPS}")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def classes(self) -> frozenset[int]:
        return frozenset(range(1, self.num_classes + 1))

    def group_members(self, group: str) -> tuple[int, ...]:
        return tuple(i + 1 for i, g in enumerate(self.groups) if g == group)

    def full_protocol(self, database_id: int = 1) -> "AnnotationProtocol":
        return AnnotationProtocol(database_id, self.classes)


@dataclass(frozen=True)
class AnnotationProtocol:
    """Which structure classes database ``database_id`` annotates."""

    database_id: int
    annotated: frozenset[int]

    def __post_init__(self) -> None:
        object.__setattr__(self, "annotated", frozenset(int(c) for c in self.annotated))
        if BACKGROUND in self.annotated:
            raise LabelError("background (0) cannot be an annotated class")
        if any(c < 0 for c in self.annotated):
            raise LabelError(f"negative class index in {sorted(self.annotated)}")

    def check(self, space: LabelSpace) -> None:
        bad = sorted(c for c in self.annotated if c > space.num_classes)
        if bad:
            raise LabelError(
                f"protocol of database {self.database_id} references classes {bad} "
                f"but the space has only {space.num_classes}"
            )


def build_label_space(names, groups) -> LabelSpace:
    return LabelSpace(tuple(names), tuple(groups))


def default_label_space() -> LabelSpace:
    return LabelSpace(DEFAULT_CLASS_NAMES, DEFAULT_GROUPS)


def non_annotated(proto: AnnotationProtocol, space: LabelSpace) -> frozenset[int]:
    """Classes of ``space`` that ``proto`` leaves labelled as background."""
    proto.check(space)
    return space.classes - proto.annotated


def relabel_to_protocol(
    full_labels: np.ndarray, proto: AnnotationProtocol, space: LabelSpace
) -> np.ndarray:
    """Send every pixel of a non-annotated class to background."""
    labels = np.asarray(full_labels)
    if labels.size and (labels.min() < 0 or labels.max() > space.num_classes):
        raise LabelError(
            f"label values must lie in 0..{space.num_classes}, "
            f"got range {labels.min()}..{labels.max()}"
        )
    dropped = sorted(non_annotated(proto, space))
    out = labels.copy()
    if dropped:
        out[np.isin(labels, dropped)] = BACKGROUND
    return out
