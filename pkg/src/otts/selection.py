"""Scoring and ranking source tasks by transport distance to a target.

Every candidate source task is embedded with the trained target
encoder (or used raw, for the extractor-bypass path), converted to its
task graph, and scored with the mixed transport loss against the
target's graph.  The M lowest-distance sources form the curriculum.
Ties break on ascending task id so rankings are total and
order-independent.

The target is normally represented by its labelled support samples;
scoring against a provided query-sample graph instead is available as
a switch for ablations that compare the two.
"""

from __future__ import annotations

import csv
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import EncoderParams, forward
from .graphs import Task, TaskGraph, build_graph
from .solvers import SolverConfig, ot_loss

__all__ = [
    "SelectionResult",
    "DistanceMatrix",
    "embed_task_graph",
    "score_sources",
    "aggregate_scores",
    "select_top_m",
    "pairwise_matrix",
    "save_distance_matrix",
    "load_distance_matrix",
    "distance_matrix_to_csv",
]

MATRIX_MAGIC = b"OTTD"
MATRIX_VERSION = 1


@dataclass
class SelectionResult:
    """Ranked similarity list for one target task."""

    target_task_id: int
    ranked: list[tuple[int, float]]  # (source task id, distance), ascending
    m: int

    def to_dict(self) -> dict:
        return {
            "target_task_id": self.target_task_id,
            "m": self.m,
            "ranked": [[tid, dist] for tid, dist in self.ranked],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionResult":
        return cls(
            target_task_id=d["target_task_id"],
            m=d["m"],
            ranked=[(int(t), float(x)) for t, x in d["ranked"]],
        )


@dataclass
class DistanceMatrix:
    """Dense transport distances, rows = targets, cols = sources."""

    values: np.ndarray
    row_ids: list[int]
    col_ids: list[int]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.row_ids), len(self.col_ids)):
            raise ValueError("matrix shape does not match id lists")


def embed_task_graph(
    task: Task, extractor: EncoderParams | None, features: np.ndarray | None = None
) -> TaskGraph:
    """Task graph of encoded features; raw features when extractor is None.

    An explicit feature matrix overrides the task's own samples (used
    to score against query sets instead of the support set).
    """
    feats = task.features if features is None else np.asarray(features, dtype=np.float64)
    if extractor is not None:
        feats = forward(extractor, feats)
    return build_graph(feats, task.task_id)


def score_sources(
    target: Task,
    sources: list[Task],
    extractor: EncoderParams | None,
    wd_weight: float = 0.8,
    cfg: SolverConfig = SolverConfig(),
    target_features: np.ndarray | None = None,
) -> list[tuple[int, float]]:
    """Transport distance from each source task to the target.

    Output order matches the input order.  target_features substitutes
    a query-sample matrix for the target's support samples.
    """
    if not sources:
        raise ValueError("sources must be non-empty")
    target_graph = embed_task_graph(target, extractor, features=target_features)
    scores = []
    for source in sources:
        try:
            graph = embed_task_graph(source, extractor)
            scores.append(
                (source.task_id, ot_loss(target_graph, graph, wd_weight, cfg))
            )
        except ValueError as exc:
            raise ValueError(f"scoring task {source.task_id} failed: {exc}") from exc
    return scores


def aggregate_scores(
    per_target_scores: list[list[tuple[int, float]]],
) -> list[tuple[int, float]]:
    """Mean distance per source across several targets' score lists."""
    if not per_target_scores:
        raise ValueError("need at least one score list")
    ids = [tid for tid, _ in per_target_scores[0]]
    for scores in per_target_scores:
        if [tid for tid, _ in scores] != ids:
            raise ValueError("score lists cover different sources")
    stacked = np.array([[d for _, d in scores] for scores in per_target_scores])
    return list(zip(ids, stacked.mean(axis=0).tolist()))


def select_top_m(scores: list[tuple[int, float]], m: int) -> SelectionResult:
    """The m most similar sources, distance ascending, ties by task id."""
    if not 1 <= m <= len(scores):
        raise ValueError(f"m must be in 1..{len(scores)}, got {m}")
    ranked = sorted(scores, key=lambda s: (s[1], s[0]))
    return SelectionResult(target_task_id=-1, ranked=ranked[:m], m=m)


def pairwise_matrix(
    tasks_a: list[Task],
    tasks_b: list[Task],
    extractor: EncoderParams | None,
    wd_weight: float = 0.8,
    cfg: SolverConfig = SolverConfig(),
    threads: int | None = None,
) -> DistanceMatrix:
    """Full matrix of transport distances between two task lists.

    Entries are independent; with threads > 1 they are computed by a
    pool and written into the matrix by index, so the result does not
    depend on scheduling.
    """
    if not tasks_a or not tasks_b:
        raise ValueError("both task lists must be non-empty")
    graphs_a = [embed_task_graph(t, extractor) for t in tasks_a]
    graphs_b = [embed_task_graph(t, extractor) for t in tasks_b]
    values = np.zeros((len(tasks_a), len(tasks_b)))

    def entry(i: int, j: int) -> None:
        try:
            values[i, j] = ot_loss(graphs_a[i], graphs_b[j], wd_weight, cfg)
        except ValueError as exc:
            raise ValueError(
                f"distance ({tasks_a[i].task_id}, {tasks_b[j].task_id}) failed: {exc}"
            ) from exc

    pairs = [(i, j) for i in range(len(tasks_a)) for j in range(len(tasks_b))]
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda ij: entry(*ij), pairs))
    else:
        for i, j in pairs:
            entry(i, j)
    return DistanceMatrix(
        values=values,
        row_ids=[t.task_id for t in tasks_a],
        col_ids=[t.task_id for t in tasks_b],
    )


def save_distance_matrix(matrix: DistanceMatrix, path) -> None:
    """Binary layout: header (counts, ids) then row-major float64."""
    n, m = matrix.values.shape
    chunks = [
        MATRIX_MAGIC,
        struct.pack("<III", MATRIX_VERSION, n, m),
        np.asarray(matrix.row_ids, dtype="<i8").tobytes(),
        np.asarray(matrix.col_ids, dtype="<i8").tobytes(),
        np.ascontiguousarray(matrix.values, dtype="<f8").tobytes(),
    ]
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_distance_matrix(path) -> DistanceMatrix:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MATRIX_MAGIC:
        raise ValueError(f"{path}: not a distance-matrix file")
    version, n, m = struct.unpack_from("<III", blob, 4)
    if version != MATRIX_VERSION:
        raise ValueError(f"unsupported matrix version {version}")
    off = 4 + 12
    expected = off + 8 * (n + m) + 8 * n * m
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(blob)}")
    row_ids = np.frombuffer(blob, dtype="<i8", count=n, offset=off).tolist()
    off += 8 * n
    col_ids = np.frombuffer(blob, dtype="<i8", count=m, offset=off).tolist()
    off += 8 * m
    values = np.frombuffer(blob, dtype="<f8", count=n * m, offset=off).reshape(n, m)
    return DistanceMatrix(values=values.copy(), row_ids=row_ids, col_ids=col_ids)


def distance_matrix_to_csv(matrix: DistanceMatrix, path) -> None:
    """CSV with id headers, for external heatmap plotting."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task_id"] + [str(c) for c in matrix.col_ids])
        for rid, row in zip(matrix.row_ids, matrix.values):
            writer.writerow([str(rid)] + [repr(v) for v in row])
