"""Spectral grouping of tasks and nearest-task assignment of new ones."""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import KMeans

from .transport import DistanceMatrix

EPS = 1e-8


class DegenerateAffinity(ValueError):
    pass


@dataclass(frozen=True)
class GroupAssignment:
    labels: np.ndarray
    C: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=int)
        if labels.size and (labels.min() < 0 or labels.max() >= self.C):
            raise ValueError(f"labels must lie in [0, {self.C})")
        object.__setattr__(self, "labels", labels)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.C)


def affinity(d: DistanceMatrix | np.ndarray) -> np.ndarray:
    """Reciprocal distances with a zero diagonal."""
    d = d.d if isinstance(d, DistanceMatrix) else np.asarray(d, dtype=float)
    a = 1.0 / (d + EPS)
    np.fill_diagonal(a, 0.0)
    return a


def _canonical(labels: np.ndarray) -> np.ndarray:
    # renumber groups by first appearance so equal partitions give equal labels
    mapping: dict[int, int] = {}
    for lab in labels:
        mapping.setdefault(int(lab), len(mapping))
    return np.array([mapping[int(lab)] for lab in labels], dtype=int)


def spectral_embedding(a: np.ndarray, C: int) -> np.ndarray:
    deg = a.sum(axis=1)
    if np.any(deg <= 0):
        raise DegenerateAffinity("some task has zero affinity to every other task")
    inv_sqrt = 1.0 / np.sqrt(deg)
    lap = np.eye(len(a)) - inv_sqrt[:, None] * a * inv_sqrt[None, :]
    _, vecs = np.linalg.eigh((lap + lap.T) / 2)
    emb = vecs[:, :C]
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    return emb / np.where(norms > 0, norms, 1.0)


def spectral_cluster(a: np.ndarray, C: int, seed: int = 0) -> GroupAssignment:
    """Normalised spectral clustering (symmetric Laplacian, row-normalised embedding)."""
    a = np.asarray(a, dtype=float)
    n = len(a)
    if not 1 <= C <= n:
        raise ValueError(f"need 1 <= C <= n, got C={C}, n={n}")
    if C == 1:
        return GroupAssignment(np.zeros(n, dtype=int), 1)
    emb = spectral_embedding(a, C)
    km = KMeans(n_clusters=C, init="k-means++", n_init=20, max_iter=300, tol=1e-8, random_state=seed)
    return GroupAssignment(_canonical(km.fit_predict(emb)), C)


def assign_new_task(t_new, training_tasks: Sequence, distance: Callable, trained: GroupAssignment) -> int:
    """Group of the closest training task; ties go to the lowest index."""
    if len(training_tasks) != len(trained.labels):
        raise ValueError("assignment does not cover the training tasks")
    d = np.array([distance(t_new, t) for t in training_tasks])
    return int(trained.labels[int(np.argmin(d))])


def assign_from_distances(cross: np.ndarray, trained: GroupAssignment) -> np.ndarray:
    """Vectorised :func:`assign_new_task` over a precomputed new-by-train matrix."""
    return trained.labels[np.argmin(cross, axis=1)]


def _pair_f1(table: np.ndarray) -> np.ndarray:
    # F1 of true group r if it were matched to predicted group c
    rows = table.sum(axis=1, keepdims=True)
    cols = table.sum(axis=0, keepdims=True)
    return np.where(table > 0, 2 * table / np.maximum(rows + cols, 1), 0.0)


def _matching(predicted: np.ndarray, truth: np.ndarray):
    p_ids, p = np.unique(predicted, return_inverse=True)
    t_ids, t = np.unique(truth, return_inverse=True)
    table = np.zeros((len(t_ids), len(p_ids)), dtype=int)
    np.add.at(table, (t, p), 1)
    f1 = _pair_f1(table)
    # most agreement first, then the best F1 among equally agreeing matchings
    rows, cols = linear_sum_assignment(-(table * (len(t_ids) + 1) + f1))
    return table, f1, rows, cols


def group_recovery_f1(predicted, truth, average: str = "macro") -> float:
    """F1 of recovered groups after the best one-to-one label matching.

    ``macro`` averages per-true-group F1 (unmatched true groups score 0);
    ``micro`` is the matched accuracy.
    """
    predicted = np.asarray(getattr(predicted, "labels", predicted))
    truth = np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ValueError("predicted and truth differ in length")
    if truth.size == 0:
        return 1.0
    table, f1, rows, cols = _matching(predicted, truth)
    if average == "micro":
        return float(table[rows, cols].sum() / truth.size)
    if average != "macro":
        raise ValueError(f"unknown average {average!r}")
    return float(f1[rows, cols].sum() / table.shape[0])
