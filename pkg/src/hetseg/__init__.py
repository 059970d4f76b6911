"""Segmentation training from databases with partially overlapping label sets."""

from hetseg.labelspace import (
    AnnotationProtocol,
    LabelSpace,
    build_label_space,
    default_label_space,
    non_annotated,
    relabel_to_protocol,
)

__all__ = [
    "AnnotationProtocol",
    "LabelSpace",
    "build_label_space",
    "default_label_space",
    "non_annotated",
    "relabel_to_protocol",
]

__version__ = "0.1.0"
