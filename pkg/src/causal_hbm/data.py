"""Per-task labelled samples and the multi-task container."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .scm import Scm

SPLITS = ("train", "val", "test")
NO_INTERVENTION = -1


@dataclass
class TaskDataset:
    """Samples of one task, already split into support and query folds.

    ``t_*`` arrays hold the intervention tag of each row: the intervened node
    index, or -1 for observational rows.
    """

    task_id: int
    split: str
    x_support: np.ndarray
    t_support: np.ndarray
    y_support: np.ndarray
    x_query: np.ndarray
    t_query: np.ndarray
    y_query: np.ndarray
    group: int | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if len(self.x_support) != len(self.y_support) or len(self.x_query) != len(self.y_query):
            raise ValueError(f"task {self.task_id}: x/y lengths differ")

    @property
    def n_features(self) -> int:
        return self.x_support.shape[1]

    def observed(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Labelled rows usable by distance and grouping code.

        Training tasks expose support and query; held-out tasks expose only
        their support set so query labels never leak.
        """
        if self.split == "train":
            return (
                np.concatenate([self.x_support, self.x_query]),
                np.concatenate([self.t_support, self.t_query]),
                np.concatenate([self.y_support, self.y_query]),
            )
        return self.x_support, self.t_support, self.y_support


@dataclass
class MultiTaskDataset:
    tasks: list[TaskDataset]
    intervention_nodes: tuple[int, ...]
    task_scms: dict[int, Scm] | None = None
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[TaskDataset]:
        return [t for t in self.tasks if t.split == name]

    @property
    def train(self) -> list[TaskDataset]:
        return self.split("train")

    @property
    def val(self) -> list[TaskDataset]:
        return self.split("val")

    @property
    def test(self) -> list[TaskDataset]:
        return self.split("test")

    @property
    def n_features(self) -> int:
        return self.tasks[0].n_features

    def by_id(self) -> dict[int, TaskDataset]:
        return {t.task_id: t for t in self.tasks}

    def group_labels(self, tasks: Sequence[TaskDataset] | None = None) -> np.ndarray | None:
        tasks = self.tasks if tasks is None else tasks
        if any(t.group is None for t in tasks):
            return None
        return np.array([t.group for t in tasks], dtype=int)


@dataclass(frozen=True)
class Standardizer:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float

    def apply(self, task: TaskDataset) -> TaskDataset:
        return replace(
            task,
            x_support=(task.x_support - self.x_mean) / self.x_std,
            x_query=(task.x_query - self.x_mean) / self.x_std,
            y_support=(task.y_support - self.y_mean) / self.y_std,
            y_query=(task.y_query - self.y_mean) / self.y_std,
        )


def fit_standardizer(tasks: Sequence[TaskDataset], include_y: bool = True) -> Standardizer:
    train = [t for t in tasks if t.split == "train"]
    if not train:
        raise ValueError("standardisation needs training tasks")
    x = np.concatenate([np.concatenate([t.x_support, t.x_query]) for t in train])
    y = np.concatenate([np.concatenate([t.y_support, t.y_query]) for t in train])
    x_std = x.std(axis=0)
    x_std[x_std == 0] = 1.0
    y_std = float(y.std()) or 1.0
    if not include_y:
        return Standardizer(x.mean(axis=0), x_std, 0.0, 1.0)
    return Standardizer(x.mean(axis=0), x_std, float(y.mean()), y_std)


def standardize(dataset: MultiTaskDataset, include_y: bool = True) -> tuple[MultiTaskDataset, Standardizer]:
    """Fit column statistics on training tasks only and apply them everywhere."""
    st = fit_standardizer(dataset.tasks, include_y=include_y)
    return replace(dataset, tasks=[st.apply(t) for t in dataset.tasks]), st


class LabelLeak(AssertionError):
    pass


@dataclass
class GuardedTask(TaskDataset):
    """A task that records every read of its query labels in ``access_log``."""

    access_log: list | None = field(default=None, repr=False, compare=False)

    def __getattribute__(self, name):
        if name == "y_query":
            log = object.__getattribute__(self, "access_log")
            if log is not None:
                log.append(object.__getattribute__(self, "task_id"))
        return object.__getattribute__(self, name)


def guard_query_labels(tasks: Sequence[TaskDataset], log: list) -> list[GuardedTask]:
    """Wrap ``tasks`` so that reading ``y_query`` appends the task id to ``log``."""
    out = []
    for t in tasks:
        g = GuardedTask(t.task_id, t.split, t.x_support, t.t_support, t.y_support,
                        t.x_query, t.t_query, t.y_query, t.group)
        g.access_log = log
        out.append(g)
    return out
