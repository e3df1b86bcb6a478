"""Incremental task schedules and per-task dataset construction.

A schedule assigns the foreground class ids 1..K to an ordered list of
tasks: the base task gets `init_count` classes, each later task gets
`incr_count` consecutive ids. Per-task training sets are carved out of a
fully labeled base dataset under one of two protocols:

    overlap   keep any image containing a current-task class; all other
              class pixels (past and future) are relabeled to background.
    disjoint  additionally reject images containing any future class.

Background is always id 0 and never belongs to a task.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ScheduleError
from .synthdata import SegSample

PROTOCOLS = ("overlap", "disjoint")


class EmptyTaskWarning(UserWarning):
    """A protocol filter produced an empty task dataset."""


@dataclass(frozen=True)
class ClassGroup:
    task_index: int
    class_ids: tuple[int, ...]

    def __post_init__(self):
        if self.task_index < 0:
            raise ValueError("task_index must be >= 0")
        if not self.class_ids:
            raise ValueError("class_ids must be non-empty")
        if any(c <= 0 for c in self.class_ids):
            raise ValueError("class ids are positive; background 0 is never in a group")
        if any(b <= a for a, b in zip(self.class_ids, self.class_ids[1:])):
            raise ValueError("class_ids must be strictly increasing")


@dataclass(frozen=True)
class TaskSchedule:
    total_classes: int
    groups: tuple[ClassGroup, ...]
    protocol: str

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}")
        if tuple(g.task_index for g in self.groups) != tuple(range(len(self.groups))):
            raise ValueError("groups must be ordered by task_index 0..T")
        seen: set[int] = set()
        for g in self.groups:
            if seen.intersection(g.class_ids):
                raise ValueError("groups must have disjoint class_ids")
            seen.update(g.class_ids)
        if seen != set(range(1, self.total_classes + 1)):
            raise ValueError("groups must cover exactly {1..total_classes}")

    @property
    def num_tasks(self) -> int:
        return len(self.groups)

    def classes_up_to(self, t: int) -> tuple[int, ...]:
        """All class ids of tasks 0..t, ascending."""
        ids: list[int] = []
        for g in self.groups[: t + 1]:
            ids.extend(g.class_ids)
        return tuple(sorted(ids))

    def old_classes(self, t: int) -> tuple[int, ...]:
        """Class ids of tasks 0..t-1, ascending (empty at t=0)."""
        return self.classes_up_to(t - 1) if t > 0 else ()

    def future_classes(self, t: int) -> tuple[int, ...]:
        ids: list[int] = []
        for g in self.groups[t + 1 :]:
            ids.extend(g.class_ids)
        return tuple(sorted(ids))


@dataclass
class TaskDataset:
    task_index: int
    samples: list[SegSample]
    visible_class_ids: tuple[int, ...]


def build_schedule(
    total_classes: int, init_count: int, incr_count: int, protocol: str = "overlap"
) -> TaskSchedule:
    """Schedule with groups {1..init_count}, then consecutive runs of
    incr_count ids. Degenerate case init_count == total_classes yields a
    single joint task."""
    if total_classes < 1:
        raise ValueError("total_classes must be >= 1")
    if not (1 <= init_count <= total_classes):
        raise ValueError("need 1 <= init_count <= total_classes")
    if incr_count < 1:
        raise ValueError("incr_count must be >= 1")
    remainder = total_classes - init_count
    if remainder % incr_count != 0:
        raise ScheduleError(
            f"{remainder} incremental classes not divisible by incr_count={incr_count}"
        )
    groups = [ClassGroup(0, tuple(range(1, init_count + 1)))]
    start = init_count + 1
    for t in range(1, 1 + remainder // incr_count):
        groups.append(ClassGroup(t, tuple(range(start, start + incr_count))))
        start += incr_count
    return TaskSchedule(total_classes=total_classes, groups=tuple(groups), protocol=protocol)


def relabel_sample(sample: SegSample, current_group: ClassGroup) -> SegSample:
    """Keep current-group pixels, map every other nonzero id to background.
    The image is untouched (shared, not copied)."""
    keep = np.isin(sample.label, current_group.class_ids)
    label = np.where(keep, sample.label, 0).astype(sample.label.dtype)
    return SegSample(image=sample.image, label=label, sample_id=sample.sample_id)


def filter_dataset(base: list[SegSample], schedule: TaskSchedule, t: int) -> TaskDataset:
    """Select and relabel the samples visible at task t under the schedule's
    protocol. Inclusion is decided on the raw (pre-relabel) labels."""
    if not (0 <= t < schedule.num_tasks):
        raise ValueError(f"task index {t} out of range for {schedule.num_tasks} tasks")
    group = schedule.groups[t]
    future = schedule.future_classes(t)
    selected = []
    for sample in base:
        present = np.unique(sample.label)
        if not np.isin(present, group.class_ids).any():
            continue
        if schedule.protocol == "disjoint" and np.isin(present, future).any():
            continue
        selected.append(relabel_sample(sample, group))
    if not selected:
        warnings.warn(
            f"task {t} ({schedule.protocol}) selected no samples", EmptyTaskWarning
        )
    return TaskDataset(task_index=t, samples=selected, visible_class_ids=group.class_ids)


def schedule_to_json(schedule: TaskSchedule) -> dict:
    """Stable wire format; field names are part of the contract."""
    return {
        "total_classes": schedule.total_classes,
        "protocol": schedule.protocol,
        "groups": [list(g.class_ids) for g in schedule.groups],
    }


def schedule_from_json(doc: dict) -> TaskSchedule:
    groups = tuple(
        ClassGroup(t, tuple(ids)) for t, ids in enumerate(doc["groups"])
    )
    return TaskSchedule(
        total_classes=doc["total_classes"], groups=groups, protocol=doc["protocol"]
    )
