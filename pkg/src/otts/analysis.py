"""Empirical probes of the distance's claimed properties.

Three analyses at desk scale:

- theorem1_probe: the feature-transport distance between two task
  graphs should bound how differently a fixed softmax classifier
  scores them.  The probe measures the joint-likelihood gap
  |p(y|G1,w) - p(y|G2,w)| against the graph distance over many pairs
  and reports their Spearman rank correlation (the bound is monotone,
  not linear, so a rank statistic is the right check).

- distance_stats: block-wise average/max/min of a distance matrix plus
  histogram bins, for intra- vs cross-domain comparisons.

- selection_vs_random_curriculum: trains the same probe classifier on
  transport-selected source tasks and on uniformly random ones, and
  compares final loss, loss stability across epochs, and accuracy on
  held-out query samples of the target's classes.

All probabilities are computed in log space; likelihood gaps are
asserted to lie in [0, 1] up to rounding before use.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .data import Corpus, DomainSampler
from .encoder import EncoderParams, forward
from .graphs import Task, build_graph
from .selection import embed_task_graph, score_sources, select_top_m
from .solvers import SolverConfig, wasserstein

__all__ = [
    "ProbeClassifier",
    "train_probe",
    "ProbeReport",
    "theorem1_probe",
    "make_probe_pairs",
    "reference_samples",
    "DistanceStats",
    "distance_stats",
    "CurriculumConfig",
    "CurriculumArm",
    "CurriculumReport",
    "selection_vs_random_curriculum",
]

_GAP_SLACK = 1e-9


@dataclass
class ProbeClassifier:
    """Linear softmax classifier over embeddings."""

    weights: np.ndarray  # n_classes x dim
    bias: np.ndarray  # n_classes

    def __post_init__(self):
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise ValueError("probe parameters must be finite")

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    def log_proba(self, features: np.ndarray) -> np.ndarray:
        """Row-wise log softmax of the class logits."""
        logits = features @ self.weights.T + self.bias
        mx = logits.max(axis=1, keepdims=True)
        shifted = logits - mx
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def joint_log_likelihood(self, features: np.ndarray, labels: np.ndarray) -> float:
        """log prod_i p(y_i | z_i), the product-form task likelihood."""
        lp = self.log_proba(features)
        return float(lp[np.arange(len(labels)), labels].sum())

    def nll(self, features: np.ndarray, labels: np.ndarray) -> float:
        lp = self.log_proba(features)
        return float(-lp[np.arange(len(labels)), labels].mean())

    def accuracy(self, features: np.ndarray, labels: np.ndarray) -> float:
        return float((self.log_proba(features).argmax(axis=1) == labels).mean())

    def grad_step(
        self, features: np.ndarray, labels: np.ndarray, lr: float
    ) -> None:
        """In-place cross-entropy gradient step on one batch."""
        proba = np.exp(self.log_proba(features))
        proba[np.arange(len(labels)), labels] -= 1.0
        proba /= len(labels)
        self.weights -= lr * proba.T @ features
        self.bias -= lr * proba.sum(axis=0)


def train_probe(
    features: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    lr: float = 0.5,
    steps: int = 300,
) -> ProbeClassifier:
    """Full-batch gradient descent from zero weights (convex, deterministic)."""
    probe = ProbeClassifier(
        weights=np.zeros((n_classes, features.shape[1])), bias=np.zeros(n_classes)
    )
    for _ in range(steps):
        probe.grad_step(features, labels, lr)
    return probe


@dataclass
class ProbeReport:
    """Per-pair distances and likelihood gaps plus summary statistics."""

    entries: list[tuple[int, float, float]]  # (pair id, distance, gap)
    spearman_rho: float
    hist_counts: np.ndarray
    hist_edges: np.ndarray

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["pair_id", "distance", "gap"])
            for pid, dist, gap in self.entries:
                writer.writerow([pid, repr(dist), repr(gap)])

    def hist_to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(
                {
                    "counts": self.hist_counts.tolist(),
                    "edges": self.hist_edges.tolist(),
                },
                fh,
                indent=2,
            )
            fh.write("\n")


def theorem1_probe(
    task_pairs: list[tuple[Task, Task]],
    probe: ProbeClassifier,
    extractor: EncoderParams | None,
    cfg: SolverConfig = SolverConfig(),
    bins: int = 20,
) -> ProbeReport:
    """Distance vs classifier-likelihood gap over task pairs.

    For each pair, both tasks are embedded and their graphs' feature
    transport distance computed; the gap is the absolute difference of
    the joint label likelihoods the probe assigns the two tasks.
    """
    if not task_pairs:
        raise ValueError("task_pairs must be non-empty")
    entries = []
    for pair_id, (task_a, task_b) in enumerate(task_pairs):
        if task_a.n_way != task_b.n_way:
            raise ValueError(f"pair {pair_id} mixes n_way values")
        if task_a.n_way != probe.n_classes:
            raise ValueError(
                f"pair {pair_id} is {task_a.n_way}-way but the probe has "
                f"{probe.n_classes} classes"
            )
        graph_a = embed_task_graph(task_a, extractor)
        graph_b = embed_task_graph(task_b, extractor)
        distance = wasserstein(graph_a, graph_b, cfg).distance

        like_a = np.exp(probe.joint_log_likelihood(graph_a.nodes, task_a.labels))
        like_b = np.exp(probe.joint_log_likelihood(graph_b.nodes, task_b.labels))
        gap = abs(like_a - like_b)
        if not -_GAP_SLACK <= gap <= 1.0 + _GAP_SLACK:
            raise AssertionError(f"likelihood gap {gap} outside [0, 1]")
        entries.append((pair_id, float(distance), float(gap)))

    distances = np.array([e[1] for e in entries])
    gaps = np.array([e[2] for e in entries])
    rho = float(spearmanr(distances, gaps).statistic) if len(entries) > 1 else 0.0
    counts, edges = np.histogram(distances, bins=bins)
    return ProbeReport(
        entries=entries, spearman_rho=rho, hist_counts=counts, hist_edges=edges
    )


def make_probe_pairs(
    sampler: DomainSampler,
    n_way: int,
    n_pairs: int,
    seed: int = 0,
    scale_low: float = 0.01,
    scale_high: float = 3.0,
) -> tuple[list[tuple[Task, Task]], tuple[int, ...]]:
    """Task pairs at graded perturbation scales over one fixed class set.

    Each pair is a 1-shot base task and a copy whose features are
    shifted by Gaussian noise of a per-pair scale, log-spaced across
    pairs, giving a spread of distances with aligned labels.  Returns
    the pairs and the class ids they share (for training a reference
    probe on the same classes).
    """
    rng = np.random.default_rng(seed)
    class_ids = tuple(
        int(c) for c in np.sort(rng.choice(sampler.class_ids, n_way, replace=False))
    )
    scales = np.geomspace(scale_low, scale_high, n_pairs)
    pairs = []
    for k in range(n_pairs):
        base_feats = np.vstack([sampler.sample(c, 1, rng) for c in class_ids])
        labels = np.arange(n_way)
        noise = rng.standard_normal(base_feats.shape)
        base = Task(2 * k, n_way, 1, base_feats, labels, sampler.spec.domain_tag,
                    class_ids)
        shifted = Task(2 * k + 1, n_way, 1, base_feats + scales[k] * noise, labels,
                       sampler.spec.domain_tag, class_ids)
        pairs.append((base, shifted))
    return pairs, class_ids


def reference_samples(
    sampler: DomainSampler, class_ids: tuple[int, ...], per_class: int, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Labelled sample set over the given classes, for probe training."""
    rng = np.random.default_rng(seed)
    feats = np.vstack([sampler.sample(c, per_class, rng) for c in class_ids])
    labels = np.repeat(np.arange(len(class_ids)), per_class)
    return feats, labels


@dataclass
class DistanceStats:
    """Average/max/min summaries of a distance matrix."""

    overall: tuple[float, float, float]  # (avg, max, min)
    blocks: dict[tuple[str, str], tuple[float, float, float]]
    hist_counts: np.ndarray
    hist_edges: np.ndarray


def distance_stats(
    matrix,
    row_groups: list[str] | None = None,
    col_groups: list[str] | None = None,
    bins: int = 20,
) -> DistanceStats:
    """Summaries of a DistanceMatrix, optionally per group block.

    Group labels (for example domain tags) aggregate entries into
    (row group, col group) blocks; diagonal self-distances are kept,
    matching how whole-block summaries are usually reported.
    """
    values = matrix.values
    if values.size == 0:
        raise ValueError("empty distance matrix")
    overall = (float(values.mean()), float(values.max()), float(values.min()))
    blocks: dict[tuple[str, str], tuple[float, float, float]] = {}
    if row_groups is not None and col_groups is not None:
        if len(row_groups) != values.shape[0] or len(col_groups) != values.shape[1]:
            raise ValueError("group labels must match matrix shape")
        rows = np.asarray(row_groups)
        cols = np.asarray(col_groups)
        for ga in sorted(set(row_groups)):
            for gb in sorted(set(col_groups)):
                sub = values[np.ix_(rows == ga, cols == gb)]
                if sub.size:
                    blocks[(ga, gb)] = (
                        float(sub.mean()),
                        float(sub.max()),
                        float(sub.min()),
                    )
    counts, edges = np.histogram(values.ravel(), bins=bins)
    return DistanceStats(
        overall=overall, blocks=blocks, hist_counts=counts, hist_edges=edges
    )


@dataclass(frozen=True)
class CurriculumConfig:
    """Settings for the selected-vs-random training comparison."""

    m: int = 20
    probe_epochs: int = 15
    probe_lr: float = 0.5
    queries_per_class: int = 20
    wd_weight: float = 0.8
    seed: int = 0
    solver: SolverConfig = SolverConfig(
        epsilon=0.05, max_iter=300, tol=1e-4,
        gw_outer_iter=6, gw_epsilon=0.05, gw_epsilon_start=0.1,
    )


@dataclass
class CurriculumArm:
    """Metrics for one training-set choice (selected or random)."""

    task_ids: list[int]
    epoch_losses: list[float]
    final_loss: float
    loss_std: float
    accuracy: float


@dataclass
class CurriculumReport:
    target_task_id: int
    selected: CurriculumArm
    random: CurriculumArm


def _embed(features: np.ndarray, extractor: EncoderParams | None) -> np.ndarray:
    return features if extractor is None else forward(extractor, features)


def _run_probe_arm(
    train_tasks: list[Task],
    query_features: np.ndarray,
    query_labels: np.ndarray,
    n_classes: int,
    extractor: EncoderParams | None,
    cfg: CurriculumConfig,
    rng: np.random.Generator,
) -> CurriculumArm:
    dim = query_features.shape[1]
    probe = ProbeClassifier(weights=np.zeros((n_classes, dim)), bias=np.zeros(n_classes))
    embedded = [
        (_embed(t.features, extractor), np.asarray(t.class_ids)[t.labels])
        for t in train_tasks
    ]
    epoch_losses = []
    for _ in range(cfg.probe_epochs):
        for idx in rng.permutation(len(embedded)):
            feats, labels = embedded[idx]
            probe.grad_step(feats, labels, cfg.probe_lr)
        epoch_losses.append(probe.nll(query_features, query_labels))
    return CurriculumArm(
        task_ids=[t.task_id for t in train_tasks],
        epoch_losses=epoch_losses,
        final_loss=epoch_losses[-1],
        loss_std=float(np.std(epoch_losses)),
        accuracy=probe.accuracy(query_features, query_labels),
    )


def selection_vs_random_curriculum(
    corpus: Corpus,
    target: Task,
    extractor: EncoderParams | None,
    samplers: dict[str, DomainSampler],
    cfg: CurriculumConfig = CurriculumConfig(),
) -> CurriculumReport:
    """Train a probe on selected vs random source tasks, compare on queries.

    The probe classifies over the corpus's global class pool; training
    tasks contribute their samples under their global class labels, and
    evaluation uses fresh query samples of the target task's classes
    drawn from the manifest's generators.  Lower, steadier query loss
    for the selected arm is the curriculum effect.
    """
    if target.class_ids is None or target.domain_tag is None:
        raise ValueError("target task needs class_ids and domain_tag")
    pool = [t for t in corpus.tasks if t.task_id != target.task_id]
    if len(pool) < cfg.m:
        raise ValueError(f"pool of {len(pool)} tasks cannot supply m={cfg.m}")
    for t in pool:
        if t.class_ids is None:
            raise ValueError(f"task {t.task_id} lacks class_ids")

    rng = np.random.default_rng(cfg.seed)
    scores = score_sources(target, pool, extractor, cfg.wd_weight, cfg.solver)
    selected_ids = {tid for tid, _ in select_top_m(scores, cfg.m).ranked}
    selected = [t for t in pool if t.task_id in selected_ids]
    random_idx = rng.choice(len(pool), size=cfg.m, replace=False)
    randoms = [pool[i] for i in random_idx]

    n_classes = sum(d["n_classes"] for d in corpus.manifest["domains"])
    sampler = samplers[target.domain_tag]
    query_rng = np.random.default_rng(cfg.seed + 1)
    query_features = np.vstack(
        [sampler.sample(c, cfg.queries_per_class, query_rng) for c in target.class_ids]
    )
    query_labels = np.repeat(np.asarray(target.class_ids), cfg.queries_per_class)
    query_features = _embed(query_features, extractor)

    arm_rng = np.random.default_rng(cfg.seed + 2)
    selected_arm = _run_probe_arm(
        selected, query_features, query_labels, n_classes, extractor, cfg, arm_rng
    )
    arm_rng = np.random.default_rng(cfg.seed + 2)
    random_arm = _run_probe_arm(
        randoms, query_features, query_labels, n_classes, extractor, cfg, arm_rng
    )
    return CurriculumReport(
        target_task_id=target.task_id, selected=selected_arm, random=random_arm
    )
