"""Synthetic pelvic phantoms and on-disk databases.

Each phantom is a 2D image containing six structures: three soft-edged
ellipses (the organs annotated by both databases) and three hard-edged bone
structures (one vertical bar and two discs). Structures are composited in
class order, so a later class wins any pixel it shares with an earlier one.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from hetseg.labelspace import (
    AnnotationProtocol,
    LabelError,
    LabelSpace,
    default_label_space,
    relabel_to_protocol,
)

log = logging.getLogger(__name__)

DATASET_VERSION = 1
MARGIN = 2
MAX_RETRIES = 100
MIN_SEPARATION = 0.15
BACKGROUND_INTENSITY = 0.0


class PlacementError(RuntimeError):
    pass


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class StructureSpec:
    """Geometry and appearance of one structure class.

    ``center`` is a nominal (row, col) position as fractions of the image
    size, jittered by up to ``jitter`` pixels. Sizes are in pixels:
    ellipse semi-axes, disc radius, or bar (half-width, half-height).
    """

    kind: str  # "ellipse" | "disc" | "bar"
    center: tuple[float, float]
    size_a: tuple[float, float]
    size_b: tuple[float, float] = (0.0, 0.0)
    intensity: float = 0.5
    jitter: float = 4.0
    softness: float = 0.0  # ramp half-width in units of the normalised radius
    max_angle: float = 0.0  # degrees, ellipses only

    def __post_init__(self) -> None:
        if self.kind not in ("ellipse", "disc", "bar"):
            raise ValueError(f"unknown structure kind {self.kind!r}")
        if not -1.0 <= self.intensity <= 1.0:
            raise ValueError(f"intensity {self.intensity} outside [-1, 1]")
        sizes = [self.size_a] + ([self.size_b] if self.kind != "disc" else [])
        for lo, hi in sizes:
            if lo < 2 or hi < lo:
                raise ValueError(f"size range ({lo}, {hi}) must satisfy 2 <= lo <= hi")
        if not 0.0 <= self.softness < 1.0:
            raise ValueError("softness must lie in [0, 1)")

    def extent(self) -> float:
        """Largest distance from the center the footprint can reach."""
        reach = 1.0 + self.softness
        if self.kind == "bar":
            return math.hypot(self.size_a[1], self.size_b[1])
        if self.kind == "disc":
            return self.size_a[1] * reach
        return max(self.size_a[1], self.size_b[1]) * reach


def default_structures() -> tuple[StructureSpec, ...]:
    return (
        # Bladder
        StructureSpec("ellipse", (0.30, 0.50), (6, 10), (5, 8), intensity=0.35,
                      jitter=5, softness=0.35, max_angle=30),
        # Rectum
        StructureSpec("ellipse", (0.62, 0.50), (3, 6), (3, 5), intensity=-0.35,
                      jitter=4, softness=0.35, max_angle=30),
        # Uterus
        StructureSpec("ellipse", (0.45, 0.50), (4, 8), (3, 6), intensity=-0.70,
                      jitter=5, softness=0.35, max_angle=45),
        # Bones: sacrum-like vertical bar
        StructureSpec("bar", (0.84, 0.50), (2, 3.5), (4, 6), intensity=1.00, jitter=3),
        # FemHeadL
        StructureSpec("disc", (0.50, 0.17), (4, 6.5), intensity=-1.00, jitter=4),
        # FemHeadR
        StructureSpec("disc", (0.50, 0.83), (4, 6.5), intensity=0.70, jitter=4),
    )


@dataclass(frozen=True)
class PhantomConfig:
    image_size: int = 64
    structures: tuple[StructureSpec, ...] = field(default_factory=default_structures)
    noise_sigma: float = 0.05
    intensity_shift: float = 0.0

    def __post_init__(self) -> None:
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        levels = [BACKGROUND_INTENSITY] + [s.intensity for s in self.structures]
        for i in range(len(levels)):
            for j in range(i + 1, len(levels)):
                if abs(levels[i] - levels[j]) < MIN_SEPARATION - 1e-12:
                    raise ValueError(
                        f"intensities of classes {i} and {j} are closer than {MIN_SEPARATION}"
                    )
        half = self.image_size / 2
        for c, s in enumerate(self.structures, start=1):
            if s.extent() + MARGIN > half:
                raise ValueError(f"class {c} cannot fit inside a {self.image_size}px image")

    @property
    def num_classes(self) -> int:
        return len(self.structures)


@dataclass
class ImageSample:
    image: np.ndarray  # float32 (H, W)
    labels: np.ndarray  # uint8 (H, W), filtered through the database protocol
    full_labels: np.ndarray  # uint8 (H, W), complete ground truth
    database_id: int

    def __eq__(self, other) -> bool:
        if not isinstance(other, ImageSample):
            return NotImplemented
        return (
            self.database_id == other.database_id
            and _same(self.image, other.image)
            and _same(self.labels, other.labels)
            and _same(self.full_labels, other.full_labels)
        )


def _same(a: np.ndarray, b: np.ndarray) -> bool:
    return a.dtype == b.dtype and a.shape == b.shape and np.array_equal(a, b)


@dataclass
class Dataset:
    samples: list[ImageSample]
    protocol: AnnotationProtocol
    split: str
    space: LabelSpace = field(default_factory=default_label_space)
    pseudo_labelled: bool = False

    def __post_init__(self) -> None:
        if not self.samples:
            raise DatasetError("a dataset needs at least one sample")
        if self.split not in ("train", "test"):
            raise DatasetError(f"split must be 'train' or 'test', got {self.split!r}")
        self.protocol.check(self.space)
        for i, s in enumerate(self.samples):
            if s.database_id != self.protocol.database_id:
                raise DatasetError(
                    f"sample {i} belongs to database {s.database_id}, "
                    f"dataset is database {self.protocol.database_id}"
                )

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def database_id(self) -> int:
        return self.protocol.database_id

    def check_labels(self) -> None:
        """Verify the manual labels against the protocol and ground truth."""
        allowed = np.array(sorted({0} | self.protocol.annotated))
        for i, s in enumerate(self.samples):
            if self.pseudo_labelled:
                if not np.isin(s.labels, allowed).all():
                    raise DatasetError(f"sample {i}: labels outside protocol {sorted(allowed)}")
            elif not np.array_equal(s.labels, relabel_to_protocol(s.full_labels, self.protocol,
                                                                  self.space)):
                raise DatasetError(f"sample {i}: labels disagree with the protocol-filtered truth")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.protocol == other.protocol
            and self.split == other.split
            and self.space == other.space
            and self.pseudo_labelled == other.pseudo_labelled
            and self.samples == other.samples
        )


# -- generation --------------------------------------------------------------

def _footprint(spec: StructureSpec, rng: np.random.Generator, size: int,
               yy: np.ndarray, xx: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
    """Sample one placement; return (alpha, label mask) or None if it misses the margin."""
    cy = spec.center[0] * size + rng.uniform(-spec.jitter, spec.jitter)
    cx = spec.center[1] * size + rng.uniform(-spec.jitter, spec.jitter)
    a = rng.uniform(*spec.size_a)
    if spec.kind == "disc":
        b, angle = a, 0.0
    else:
        b = rng.uniform(*spec.size_b)
        angle = math.radians(rng.uniform(-spec.max_angle, spec.max_angle)) if spec.max_angle else 0.0

    dy, dx = yy - cy, xx - cx
    if spec.kind == "bar":
        inside = (np.abs(dx) <= a) & (np.abs(dy) <= b)
        alpha = inside.astype(np.float64)
    else:
        c, s = math.cos(angle), math.sin(angle)
        u = (c * dx + s * dy) / a
        v = (-s * dx + c * dy) / b
        r = np.sqrt(u * u + v * v)
        inside = r <= 1.0
        if spec.softness > 0:
            alpha = np.clip((1.0 + spec.softness - r) / (2 * spec.softness), 0.0, 1.0)
        else:
            alpha = inside.astype(np.float64)

    support = alpha > 0
    if not inside.any():
        return None
    rows, cols = np.nonzero(support)
    if (rows.min() < MARGIN or cols.min() < MARGIN
            or rows.max() > size - 1 - MARGIN or cols.max() > size - 1 - MARGIN):
        return None
    return alpha, inside


def generate_phantom(rng: np.random.Generator, cfg: PhantomConfig | None = None
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Return a normalised float32 image and its uint8 ground-truth label map."""
    cfg = cfg or PhantomConfig()
    size = cfg.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    canvas = np.full((size, size), BACKGROUND_INTENSITY)
    labels = np.zeros((size, size), dtype=np.uint8)

    for cls, spec in enumerate(cfg.structures, start=1):
        for _ in range(MAX_RETRIES):
            placed = _footprint(spec, rng, size, yy, xx)
            if placed is None:
                continue
            alpha, inside = placed
            # never swallow more than half of an already placed structure
            ok = True
            for prev in range(1, cls):
                visible = labels == prev
                n_prev = visible.sum()
                if n_prev and (visible & inside).sum() > 0.5 * n_prev:
                    ok = False
                    break
            if ok:
                break
        else:
            raise PlacementError(
                f"could not place class {cls} ({spec.kind}) after {MAX_RETRIES} attempts"
            )
        canvas = canvas * (1.0 - alpha) + spec.intensity * alpha
        labels[inside] = cls

    image = canvas + rng.normal(0.0, cfg.noise_sigma, size=canvas.shape)
    std = image.std()
    image = (image - image.mean()) / (std if std > 0 else 1.0)
    image = image + cfg.intensity_shift
    return image.astype(np.float32), labels


def generate_database(seed: int, cfg: PhantomConfig, proto: AnnotationProtocol, n: int,
                      split: str = "train", space: LabelSpace | None = None) -> Dataset:
    """Generate ``n`` phantoms; sample ``i`` is drawn from ``default_rng(seed + i)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    space = space or default_label_space()
    if space.num_classes != cfg.num_classes:
        raise ValueError(
            f"label space has {space.num_classes} classes, phantom config {cfg.num_classes}"
        )
    proto.check(space)
    samples = []
    for i in range(n):
        image, full = generate_phantom(np.random.default_rng(seed + i), cfg)
        labels = relabel_to_protocol(full, proto, space)
        samples.append(ImageSample(image, labels, full, proto.database_id))
    return Dataset(samples, proto, split, space)


def class_pixel_fractions(ds: Dataset, use_full: bool = True) -> np.ndarray:
    """Mean fraction of image pixels per class, index 0 = background."""
    k = ds.space.num_classes + 1
    counts = np.zeros(k)
    total = 0
    for s in ds.samples:
        lab = s.full_labels if use_full else s.labels
        counts += np.bincount(lab.ravel(), minlength=k)[:k]
        total += lab.size
    return counts / total


# -- persistence ---------------------------------------------------------------

def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_dataset(ds: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    h, w = ds.samples[0].image.shape
    entries = []
    for i, s in enumerate(ds.samples):
        if s.image.shape != (h, w):
            raise DatasetError(f"sample {i} has shape {s.image.shape}, expected {(h, w)}")
        files = {
            "image": (f"img_{i}.f32", s.image.astype("<f4").tobytes()),
            "labels": (f"lab_{i}.u8", s.labels.astype(np.uint8).tobytes()),
            "full_labels": (f"full_{i}.u8", s.full_labels.astype(np.uint8).tobytes()),
        }
        entry = {"index": i}
        for key, (name, data) in files.items():
            (directory / name).write_bytes(data)
            entry[key] = {"file": name, "bytes": len(data), "sha256": _digest(data)}
        entries.append(entry)
    manifest = {
        "version": DATASET_VERSION,
        "H": h,
        "W": w,
        "C": ds.space.num_classes,
        "class_names": list(ds.space.class_names),
        "groups": list(ds.space.groups),
        "protocol": {"annotated": sorted(ds.protocol.annotated)},
        "database_id": ds.database_id,
        "split": ds.split,
        "pseudo_labelled": ds.pseudo_labelled,
        "samples": entries,
    }
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return directory


def load_dataset(directory, verify: bool = True) -> Dataset:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"no manifest.json in {directory}")
    try:
        m = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{mpath}: invalid JSON ({exc})") from exc
    if m.get("version") != DATASET_VERSION:
        raise DatasetError(f"{mpath}: unsupported dataset version {m.get('version')}")
    h, w = int(m["H"]), int(m["W"])
    space = LabelSpace(tuple(m["class_names"]), tuple(m["groups"]))
    if space.num_classes != m["C"]:
        raise DatasetError(f"{mpath}: C={m['C']} but {space.num_classes} class names")
    proto = AnnotationProtocol(int(m["database_id"]), frozenset(m["protocol"]["annotated"]))
    kinds = {"image": ("<f4", 4), "labels": (np.uint8, 1), "full_labels": (np.uint8, 1)}

    samples = []
    for entry in m["samples"]:
        i = entry["index"]
        arrays = {}
        for key, (dtype, width) in kinds.items():
            spec = entry[key]
            path = directory / spec["file"]
            if not path.exists():
                raise DatasetError(f"sample {i}: missing {key} file {spec['file']}")
            data = path.read_bytes()
            if len(data) != spec["bytes"]:
                raise DatasetError(
                    f"sample {i}: {spec['file']} has {len(data)} bytes, manifest says {spec['bytes']}"
                )
            if len(data) != h * w * width:
                raise DatasetError(
                    f"sample {i}: {spec['file']} has {len(data)} bytes, "
                    f"shape mismatch with H={h}, W={w} ({h * w * width} expected)"
                )
            if verify and _digest(data) != spec["sha256"]:
                raise DatasetError(f"sample {i}: checksum mismatch for {spec['file']}")
            arr = np.frombuffer(data, dtype=dtype).reshape(h, w)
            arrays[key] = arr.astype(np.float32) if key == "image" else arr.copy()
        for key in ("labels", "full_labels"):
            if arrays[key].max(initial=0) > space.num_classes:
                raise LabelError(f"sample {i}: {key} value exceeds C={space.num_classes}")
        samples.append(ImageSample(arrays["image"], arrays["labels"], arrays["full_labels"],
                                   proto.database_id))
    ds = Dataset(samples, proto, m["split"], space, bool(m.get("pseudo_labelled", False)))
    if verify:
        ds.check_labels()
    return ds


def with_samples(ds: Dataset, samples: list[ImageSample], **changes) -> Dataset:
    return replace(ds, samples=samples, **changes)
