"""Confusion-matrix segmentation metrics and forgetting curves.

IoU ratios and their means are computed in exact rational arithmetic
(counts are integers) and converted to float once at the end, so results
are the correctly rounded values of the underlying rationals.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ContractError
from .schedule import TaskSchedule


@dataclass
class ConfusionMatrix:
    """counts[gt, pred] over {0..K}; row/col 0 is background."""

    counts: np.ndarray  # [K+1, K+1] int64

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0] - 1

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.counts.shape != self.counts.shape:
            raise ContractError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> None:
        self.counts += _count(pred, gt, self.num_classes)


def _count(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise ContractError("pred and gt shapes differ")
    k = num_classes + 1
    if pred.size and (pred.min() < 0 or pred.max() >= k or gt.min() < 0 or gt.max() >= k):
        raise ContractError(f"label outside 0..{num_classes}")
    flat = gt.astype(np.int64) * k + pred.astype(np.int64)
    return np.bincount(flat, minlength=k * k).reshape(k, k)


def accumulate_confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> ConfusionMatrix:
    return ConfusionMatrix(_count(pred, gt, num_classes))


def per_class_iou(conf: ConfusionMatrix, class_subset) -> dict[int, float | None]:
    """IoU per class; None where the class appears in neither gt nor pred."""
    out: dict[int, float | None] = {}
    counts = conf.counts
    for c in sorted(class_subset):
        if not (0 <= c <= conf.num_classes):
            raise ValueError(f"class {c} outside matrix range")
        inter = int(counts[c, c])
        union = int(counts[c, :].sum()) + int(counts[:, c].sum()) - inter
        out[c] = None if union == 0 else float(Fraction(inter, union))
    return out


def miou(conf: ConfusionMatrix, class_subset) -> float | None:
    """Mean IoU over the subset; zero-denominator classes are skipped, and
    the result is None when every class is skipped."""
    subset = sorted(set(class_subset))
    if not subset:
        raise ValueError("class subset must be non-empty")
    counts = conf.counts
    total = Fraction(0)
    n = 0
    for c in subset:
        if not (0 <= c <= conf.num_classes):
            raise ValueError(f"class {c} outside matrix range")
        inter = int(counts[c, c])
        union = int(counts[c, :].sum()) + int(counts[:, c].sum()) - inter
        if union == 0:
            continue
        total += Fraction(inter, union)
        n += 1
    return None if n == 0 else float(total / n)


@dataclass
class GroupMetrics:
    task_index: int
    per_class: dict[int, float | None]
    group_miou: dict[str, float | None]  # keys: base, new, all

    def to_json_dict(self) -> dict:
        return {
            "task_index": self.task_index,
            "per_class_iou": {str(c): v for c, v in self.per_class.items()},
            "group_miou": dict(self.group_miou),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "GroupMetrics":
        return cls(
            task_index=doc["task_index"],
            per_class={int(c): v for c, v in doc["per_class_iou"].items()},
            group_miou=dict(doc["group_miou"]),
        )


def group_metrics(
    conf: ConfusionMatrix,
    schedule: TaskSchedule,
    t: int,
    include_background: bool = False,
) -> GroupMetrics:
    """Base group = task 0 classes, new = everything learned since, all =
    their union. `include_background` folds class 0 into each subset (off
    by default, matching foreground-range reporting)."""
    if not (0 <= t < schedule.num_tasks):
        raise ValueError("task index outside schedule")
    base = list(schedule.groups[0].class_ids)
    new = [c for g in schedule.groups[1 : t + 1] for c in g.class_ids]
    if include_background:
        base = [0] + base
        new = [0] + new if new else []
    seen = sorted(set(base) | set(new))
    return GroupMetrics(
        task_index=t,
        per_class=per_class_iou(conf, seen),
        group_miou={
            "base": miou(conf, base),
            "new": miou(conf, new) if new else None,
            "all": miou(conf, seen),
        },
    )


@dataclass
class ForgettingCurve:
    series: list[tuple[int, float | None]]  # (task_index, base-group mIoU)
    reference: float | None  # base mIoU right after task 0
    final_drop: float | None

    def to_json_dict(self) -> dict:
        return {
            "series": [[t, v] for t, v in self.series],
            "reference": self.reference,
            "final_drop": self.final_drop,
        }


def forgetting_curve(history: list[GroupMetrics]) -> ForgettingCurve:
    """Base-group mIoU after each task plus the endpoint drop."""
    if not history:
        raise ValueError("history must cover at least task 0")
    if [m.task_index for m in history] != list(range(len(history))):
        raise ValueError("history must be ordered task 0..T without gaps")
    series = [(m.task_index, m.group_miou["base"]) for m in history]
    reference = series[0][1]
    last = series[-1][1]
    drop = None if reference is None or last is None else reference - last
    return ForgettingCurve(series=series, reference=reference, final_drop=drop)


def param_count(module_or_snapshot) -> int:
    """Exact learnable-parameter count of a torch module or a snapshot."""
    if hasattr(module_or_snapshot, "parameters"):
        return sum(p.numel() for p in module_or_snapshot.parameters() if p.requires_grad)
    if hasattr(module_or_snapshot, "param_count"):
        return module_or_snapshot.param_count()
    raise TypeError("expected an nn.Module or a ModelSnapshot")


def write_curves_csv(path, history: list[GroupMetrics]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task_index", "base_miou", "new_miou", "all_miou"])
        for m in history:
            writer.writerow(
                [
                    m.task_index,
                    _fmt(m.group_miou["base"]),
                    _fmt(m.group_miou["new"]),
                    _fmt(m.group_miou["all"]),
                ]
            )


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(v)
