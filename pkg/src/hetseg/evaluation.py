"""Dice evaluation, seed aggregation and paired significance testing."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass

import numpy as np

from hetseg.labelspace import LabelSpace
from hetseg.netcore import ModelParams, NetConfig
from hetseg.phantom import Dataset

GROUP_KEYS = ("mean_overlap", "mean_nonoverlap", "mean_total")


class EvalError(ValueError):
    pass


def dice(pred: np.ndarray, truth: np.ndarray, cls: int) -> float:
    """2|P & T| / (|P| + |T|) for class ``cls``; 1.0 when both maps lack it."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise EvalError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    p, t = pred == cls, truth == cls
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


@dataclass
class MetricsRecord:
    per_class: np.ndarray  # (C,), index 0 = class 1
    per_case: np.ndarray  # (n_cases, C)
    space: LabelSpace
    seed: int | None = None

    def group_mean(self, group: str) -> float:
        idx = [c - 1 for c in self.space.group_members(group)]
        return float(np.mean(self.per_class[idx])) if idx else float("nan")

    @property
    def mean_overlap(self) -> float:
        return self.group_mean("overlapping")

    @property
    def mean_nonoverlap(self) -> float:
        return self.group_mean("non_overlapping")

    @property
    def mean_total(self) -> float:
        return float(np.mean(self.per_class))

    def row(self) -> list[float]:
        """dice_c1..dice_cC, mean_overlap, mean_nonoverlap, mean_total."""
        return [*map(float, self.per_class), self.mean_overlap, self.mean_nonoverlap,
                self.mean_total]

    def case_means(self) -> np.ndarray:
        """Per-test-case mean Dice over all classes."""
        return self.per_case.mean(axis=1)


def column_names(space: LabelSpace) -> list[str]:
    return [f"dice_c{c}" for c in range(1, space.num_classes + 1)] + list(GROUP_KEYS)


def evaluate_predictions(preds: np.ndarray, test: Dataset, seed: int | None = None
                         ) -> MetricsRecord:
    space = test.space
    per_case = np.empty((len(test), space.num_classes))
    for i, (pred, s) in enumerate(zip(preds, test.samples)):
        if s.full_labels is None:
            raise EvalError(f"test sample {i} has no ground truth")
        for c in range(1, space.num_classes + 1):
            per_case[i, c - 1] = dice(pred, s.full_labels, c)
    return MetricsRecord(per_case.mean(axis=0), per_case, space, seed)


def evaluate(params: ModelParams, test: Dataset, space: LabelSpace, net: NetConfig,
             seed: int | None = None) -> MetricsRecord:
    """Per-class Dice of eval-mode predictions against the full ground truth."""
    from hetseg.trainer import predict

    if space.num_classes != net.num_classes or space != test.space:
        raise EvalError("model, test set and label space disagree on the classes")
    images = np.stack([s.image for s in test.samples])
    _, preds = predict(params, images, net)
    return evaluate_predictions(preds, test, seed)


def paired_permutation_test(scores_a, scores_b, n_perm: int = 10000, seed: int = 0) -> float:
    """Two-sided sign-flip test on paired differences.

    p = (1 + #{|mean of flipped differences| >= |observed mean|}) / (1 + n_perm)
    """
    a, b = np.asarray(scores_a, dtype=float), np.asarray(scores_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise EvalError(f"score vectors must be 1-D and paired: {a.shape} vs {b.shape}")
    if a.size < 2:
        raise EvalError("need at least two paired cases")
    d = a - b
    observed = abs(d.mean())
    rng = np.random.default_rng(seed)
    signs = rng.choice(np.array([-1.0, 1.0]), size=(n_perm, d.size))
    perm = np.abs(signs @ d / d.size)
    # rounding slack so exact ties count as ties
    hits = int(np.count_nonzero(perm >= observed - 1e-12 * max(1.0, observed)))
    return (1 + hits) / (1 + n_perm)


def exact_sign_flip_p(scores_a, scores_b) -> float:
    """Exhaustive two-sided sign-flip p-value over all 2**n assignments."""
    d = np.asarray(scores_a, dtype=float) - np.asarray(scores_b, dtype=float)
    observed = abs(d.mean())
    signs = np.array(list(itertools.product((-1.0, 1.0), repeat=d.size)))
    perm = np.abs(signs @ d / d.size)
    return float(np.mean(perm >= observed - 1e-12 * max(1.0, observed)))


@dataclass
class SeedSummary:
    mean: np.ndarray  # aligned with column_names
    std: np.ndarray
    n_seeds: int
    case_means: np.ndarray  # per-test-case mean Dice averaged over seeds


def aggregate_seeds(records: list[MetricsRecord]) -> SeedSummary:
    """Mean and population standard deviation of every entry across seeds."""
    if not records:
        raise EvalError("no records to aggregate")
    space = records[0].space
    shape = records[0].per_case.shape
    for r in records[1:]:
        if r.space != space or r.per_case.shape != shape:
            raise EvalError("records differ in class structure or test-set size")
    rows = np.array([r.row() for r in records])
    cases = np.array([r.case_means() for r in records])
    return SeedSummary(rows.mean(axis=0), rows.std(axis=0), len(records), cases.mean(axis=0))


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def metrics_header(space: LabelSpace) -> list[str]:
    return ["method", "seed", "source"] + column_names(space)


def append_metrics_row(path, method: str, seed: int, source: str, record: MetricsRecord) -> None:
    """Append one row to a metrics CSV, writing the header for a new file."""
    from pathlib import Path

    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(metrics_header(record.space))
        writer.writerow([method, seed, source] + [_fmt(v) for v in record.row()])


def write_summary(path, space: LabelSpace, summaries: dict[str, SeedSummary],
                  p_values: dict[str, float | None]) -> None:
    cols = column_names(space)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "n_seeds"] + cols + [c + "_std" for c in cols] + ["p_vs_sl1"])
        for method, s in summaries.items():
            p = p_values.get(method)
            writer.writerow([method, s.n_seeds] + [_fmt(v) for v in s.mean]
                            + [_fmt(v) for v in s.std] + ["" if p is None else _fmt(p)])
