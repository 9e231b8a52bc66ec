"""Few-shot tasks and the graphs the transport solvers consume.

A task is an N-way K-shot bundle of labelled feature vectors.  Its
graph has one node per sample (the feature vector) and fully-connected
edges weighted by pairwise Euclidean distance, so graph comparison sees
both where the samples sit and how they relate to each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["Task", "TaskGraph", "build_graph", "split_task"]


@dataclass
class Task:
    """An N-way K-shot set of labelled feature vectors.

    features is (n_way * k_shot) x dim with labels in 0..n_way-1,
    exactly k_shot samples per label.  class_ids optionally records the
    originating global class of each label (provenance, used by the
    synthetic-data tooling); domain_tag records which corpus domain the
    task was sampled from.
    """

    task_id: int
    n_way: int
    k_shot: int
    features: np.ndarray
    labels: np.ndarray
    domain_tag: str | None = None
    class_ids: tuple[int, ...] | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.n_way < 1 or self.k_shot < 1:
            raise ValueError("n_way and k_shot must be positive")
        expected = self.n_way * self.k_shot
        if self.features.ndim != 2 or self.features.shape[0] != expected:
            raise ValueError(
                f"expected {expected} feature rows for "
                f"{self.n_way}-way {self.k_shot}-shot, got {self.features.shape}"
            )
        if self.labels.shape != (expected,):
            raise ValueError("labels must be one per sample")
        if not np.isfinite(self.features).all():
            raise ValueError("features contain non-finite values")
        counts = np.bincount(self.labels, minlength=self.n_way)
        if self.labels.min() < 0 or self.labels.max() >= self.n_way:
            raise ValueError("labels must lie in 0..n_way-1")
        if (counts != self.k_shot).any():
            raise ValueError(
                f"each of the {self.n_way} labels needs exactly "
                f"{self.k_shot} samples, got counts {counts.tolist()}"
            )
        if self.class_ids is not None:
            self.class_ids = tuple(int(c) for c in self.class_ids)
            if len(self.class_ids) != self.n_way:
                raise ValueError("class_ids must list one class per label")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def samples_of(self, label: int) -> np.ndarray:
        return self.features[self.labels == label]


@dataclass
class TaskGraph:
    """Fully-connected graph over a task's sample features.

    nodes is n x dim; intra_cost is the exact symmetric matrix of
    pairwise Euclidean node distances with a zero diagonal.
    """

    nodes: np.ndarray
    intra_cost: np.ndarray
    source_task: int

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]


def _pairwise_euclidean(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=2))
    # exact symmetry and a hard-zero diagonal, not just up to rounding
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return d


def build_graph(
    features: np.ndarray, task_id: int, normalize: bool = False
) -> TaskGraph:
    """Build the task graph for a matrix of sample features.

    Args:
        features: n x dim matrix, one row per sample, n >= 1.
        task_id: provenance id stored on the graph.
        normalize: L2-normalise rows first (off by default; edge weights
            are raw Euclidean distances).
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("features must be a non-empty n x dim matrix")
    if not np.isfinite(features).all():
        raise ValueError("features contain non-finite values")
    if normalize:
        norms = np.linalg.norm(features, axis=1, keepdims=True)
        features = features / np.maximum(norms, 1e-12)
    return TaskGraph(
        nodes=features,
        intra_cost=_pairwise_euclidean(features),
        source_task=task_id,
    )


def task_graph(task: Task, normalize: bool = False) -> TaskGraph:
    """Graph of a task's raw (un-encoded) features."""
    return build_graph(task.features, task.task_id, normalize=normalize)


def split_task(task: Task, seed: int) -> tuple[Task, Task]:
    """Split a 2-shot task into a disjoint positive pair of 1-shot tasks.

    For every class one of its two samples goes to the first half and
    the other to the second, with the assignment drawn per class from
    the seeded generator.  The two halves partition the task's samples
    exactly and keep its task_id, classes and domain tag.
    """
    if task.k_shot != 2:
        raise ValueError(f"split_task requires k_shot == 2, got {task.k_shot}")
    rng = np.random.default_rng(seed)
    first_rows = np.empty(task.n_way, dtype=np.int64)
    second_rows = np.empty(task.n_way, dtype=np.int64)
    for label in range(task.n_way):
        rows = np.flatnonzero(task.labels == label)
        if rng.integers(2) == 1:
            rows = rows[::-1]
        first_rows[label] = rows[0]
        second_rows[label] = rows[1]

    def half(rows: np.ndarray) -> Task:
        return Task(
            task_id=task.task_id,
            n_way=task.n_way,
            k_shot=1,
            features=task.features[rows].copy(),
            labels=task.labels[rows].copy(),
            domain_tag=task.domain_tag,
            class_ids=task.class_ids,
        )

    return half(first_rows), half(second_rows)
