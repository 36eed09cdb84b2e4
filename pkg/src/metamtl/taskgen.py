"""Auxiliary-task construction: embedding-space transforms, seeded k-means
partitions, pseudo-label tasks and cluster/label agreement scoring.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .embedding import EmbeddingMatrix
from .errors import DataError, ParameterError

TRANSFORM_KINDS = ("random_scaling", "half_dims")


@dataclass(frozen=True)
class TransformMode:
    kind: str
    seed: int

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ParameterError(f"unknown transform kind {self.kind!r}")


@dataclass
class Partition:
    """One clustering of the (transformed) embedding space."""

    assignments: np.ndarray
    k: int
    centroids: np.ndarray
    inertia: float
    transform: TransformMode | None
    seed: int
    n_iter: int
    inertia_history: list[float] = field(default_factory=list)


@dataclass
class TaskDataset:
    """A pseudo-labeled classification task over an existing dataset's inputs."""

    inputs: np.ndarray
    pseudo_labels: np.ndarray
    num_classes: int
    task_id: int


def scaling_vector(d: int, seed: int) -> np.ndarray:
    """Per-dimension scales drawn uniformly from (0, 1)."""
    return np.random.default_rng(seed).random(d)


def half_dim_indices(d: int, seed: int) -> np.ndarray:
    """A sorted choice of floor(d/2) dimensions."""
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(d, size=d // 2, replace=False))


def transform_embedding(z: EmbeddingMatrix, mode: TransformMode) -> EmbeddingMatrix:
    """Randomly rescale all dimensions, or keep a random half of them."""
    if mode.kind == "random_scaling":
        rows = z.rows * scaling_vector(z.d, mode.seed)[None, :]
    else:
        if z.d < 2:
            raise ParameterError("half_dims needs an embedding with d >= 2")
        rows = z.rows[:, half_dim_indices(z.d, mode.seed)]
    return EmbeddingMatrix(rows, source=z.source)


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = (points * points).sum(axis=1)[:, None] \
        - 2.0 * points @ centroids.T \
        + (centroids * centroids).sum(axis=1)[None, :]
    return np.maximum(d2, 0.0)


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(n)]
    best = _squared_distances(points, centroids[:1])[:, 0]
    for i in range(1, k):
        total = best.sum()
        if total <= 0.0:
            centroids[i] = points[rng.integers(n)]
            continue
        centroids[i] = points[rng.choice(n, p=best / total)]
        best = np.minimum(best, _squared_distances(points, centroids[i:i + 1])[:, 0])
    return centroids


def kmeans(z, k: int, max_iter: int = 300, tol: float = 1e-6,
           seed: int = 0, n_init: int = 10) -> Partition:
    """Lloyd's algorithm with k-means++ seeding, best of n_init restarts.

    Each restart stops when the assignments stabilize, the relative inertia
    improvement drops below tol, or max_iter is reached.  Inertia is the
    summed squared distance of every point to its assigned centroid and
    never increases from one Lloyd iteration to the next; an emptied cluster
    is reseeded to the point currently farthest from its own centroid.
    """
    points = z.rows if isinstance(z, EmbeddingMatrix) else np.asarray(z, dtype=np.float64)
    n = points.shape[0]
    if k < 2:
        raise ParameterError(f"k must be >= 2, got {k}")
    if k > n:
        raise ParameterError(f"k={k} exceeds the number of points n={n}")
    if n_init < 1:
        raise ParameterError(f"n_init must be positive, got {n_init}")
    rng = np.random.default_rng(seed)
    best: Partition | None = None
    for _ in range(n_init):
        part = _lloyd_once(points, k, max_iter, tol, rng)
        if best is None or part.inertia < best.inertia:
            best = part
    best.seed = seed
    return best


def _lloyd_once(points: np.ndarray, k: int, max_iter: int, tol: float,
                rng: np.random.Generator) -> Partition:
    n = points.shape[0]
    centroids = _kmeans_pp_init(points, k, rng)

    assignments = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d2 = _squared_distances(points, centroids)
        new_assign = d2.argmin(axis=1)
        point_d2 = d2[np.arange(n), new_assign]

        counts = np.bincount(new_assign, minlength=k)
        while (counts == 0).any():
            # reseeding may empty a one-point donor cluster, so loop to a fixed point
            empty = int(np.flatnonzero(counts == 0)[0])
            far = int(point_d2.argmax())
            new_assign[far] = empty
            point_d2[far] = 0.0
            counts = np.bincount(new_assign, minlength=k)

        stable = bool((new_assign == assignments).all())
        assignments = new_assign
        for c in range(k):
            centroids[c] = points[assignments == c].mean(axis=0)

        inertia = float(_squared_distances(points, centroids)
                        [np.arange(n), assignments].sum())
        if history and inertia > history[-1] * (1.0 + 1e-12) + 1e-12:
            raise RuntimeError(
                f"inertia increased from {history[-1]} to {inertia}")
        improved = not history or history[-1] - inertia >= tol * max(history[-1], 1e-300)
        history.append(inertia)
        if stable or not improved:
            break

    return Partition(assignments=assignments, k=k, centroids=centroids,
                     inertia=history[-1], transform=None, seed=0,
                     n_iter=n_iter, inertia_history=history)


def make_partitions(z: EmbeddingMatrix, t_count: int, k: int, mode_kind: str,
                    seed: int, max_iter: int = 300, tol: float = 1e-6) -> list[Partition]:
    """Cluster t_count transformed copies of the embedding space.

    Partition t derives its transform (and clustering) seed as seed XOR t,
    so the partitions are mutually independent given the base seed.
    """
    if t_count < 1:
        raise ParameterError(f"need at least one partition, got {t_count}")
    partitions = []
    for t in range(t_count):
        child = seed ^ t
        mode = TransformMode(mode_kind, child)
        part = kmeans(transform_embedding(z, mode), k,
                      max_iter=max_iter, tol=tol, seed=child)
        part.transform = mode
        partitions.append(part)
    return partitions


def partition_to_task(p: Partition, data: LabeledDataset,
                      task_id: int = 0) -> TaskDataset:
    """Wrap cluster assignments as pseudo-labels over the dataset's inputs."""
    if len(p.assignments) != data.n:
        raise DataError(
            f"partition covers {len(p.assignments)} examples, dataset has {data.n}")
    return TaskDataset(inputs=data.inputs, pseudo_labels=p.assignments.copy(),
                       num_classes=p.k, task_id=task_id)


def random_label_task(data: LabeledDataset, k: int, seed: int,
                      task_id: int = 0) -> TaskDataset:
    """Uniformly random pseudo-labels; the control counterpart of k-means tasks."""
    if k < 2:
        raise ParameterError(f"need at least 2 classes, got {k}")
    rng = np.random.default_rng(seed)
    return TaskDataset(inputs=data.inputs,
                       pseudo_labels=rng.integers(0, k, size=data.n),
                       num_classes=k, task_id=task_id)


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def cluster_nmi(a, b) -> float:
    """Normalized mutual information with arithmetic-mean normalization.

    Invariant to relabeling of either side.  Two constant labelings score
    1.0; a constant against a non-constant labeling scores 0.0.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.size == 0 or b.size == 0:
        raise DataError("cluster_nmi needs non-empty labelings")
    if a.shape != b.shape:
        raise DataError(f"labelings differ in length: {a.shape} vs {b.shape}")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    na, nb = ai.max() + 1, bi.max() + 1
    contingency = np.zeros((na, nb), dtype=np.float64)
    np.add.at(contingency, (ai, bi), 1.0)

    n = contingency.sum()
    ha = _entropy(contingency.sum(axis=1))
    hb = _entropy(contingency.sum(axis=0))
    if ha == 0.0 and hb == 0.0:
        return 1.0
    if ha == 0.0 or hb == 0.0:
        return 0.0
    pij = contingency / n
    pa = pij.sum(axis=1)[:, None]
    pb = pij.sum(axis=0)[None, :]
    nz = pij > 0
    mi = float((pij[nz] * np.log(pij[nz] / (pa @ pb)[nz])).sum())
    return float(np.clip(mi / ((ha + hb) / 2.0), 0.0, 1.0))


def export_partition(path, p: Partition) -> None:
    """Plain-text export: a header line then one "index,cluster" line per example."""
    kind = p.transform.kind if p.transform else "none"
    seed = p.transform.seed if p.transform else p.seed
    with open(path, "w") as f:
        f.write(f"k={p.k},transform={kind},seed={seed}\n")
        for i, c in enumerate(p.assignments):
            f.write(f"{i},{int(c)}\n")
