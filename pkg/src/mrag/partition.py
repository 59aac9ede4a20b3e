"""Database partitioning strategies.

Four ways to assign every memory-pool item to one (or, for category
data, several) of M partitions: random-hyperplane hashing, K-means
clustering, spectral clustering over the navigable-graph adjacency, and
explicit category labels. All strategies are deterministic under a fixed
seed and pure over their inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .corpus import TextPair
from .index import HnswGraph, HnswParams

STRATEGIES = ("randomization", "clustering", "indexing", "category")

SPECTRAL_DENSE_CAP = 20000


class PartitionError(Exception):
    pass


class DegenerateInput(PartitionError):
    pass


class TooLarge(PartitionError):
    pass


class MissingCategories(PartitionError):
    pass


class CategoryCountMismatch(PartitionError):
    pass


@dataclass(frozen=True)
class PartitionSpec:
    strategy: str
    m: int
    seed: int = 42

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")


@dataclass
class PartitionAssignment:
    """Item index -> non-empty set of partition ids in [0, m)."""

    assignments: dict[int, frozenset[int]]
    m: int
    strategy: str = "manual"
    warning: str | None = None

    def validate(self, n_items: int | None = None) -> None:
        if n_items is not None and set(self.assignments) != set(range(n_items)):
            raise AssertionError("assignment does not cover every item exactly once")
        for idx, pids in self.assignments.items():
            if not pids:
                raise AssertionError(f"item {idx} has no partition")
            if any(p < 0 or p >= self.m for p in pids):
                raise AssertionError(f"item {idx} has out-of-range partition id")

    def partition_sizes(self) -> list[int]:
        sizes = [0] * self.m
        for pids in self.assignments.values():
            for p in pids:
                sizes[p] += 1
        return sizes


def _single(labels, m: int, strategy: str, warning: str | None = None) -> PartitionAssignment:
    assignments = {i: frozenset([int(lab)]) for i, lab in enumerate(labels)}
    return PartitionAssignment(assignments=assignments, m=m,
                               strategy=strategy, warning=warning)


def partition_randomization(vectors: np.ndarray, spec: PartitionSpec) -> PartitionAssignment:
    """Random-hyperplane hashing: ceil(log2 M) seeded Gaussian hyperplanes
    give each vector an h-bit sign code, mapped to partitions modulo M.
    Identical vectors always land in the same partition."""
    vectors = np.asarray(vectors, dtype=np.float64)
    n, dim = vectors.shape
    if spec.m == 1:
        return _single(np.zeros(n, dtype=int), 1, "randomization")
    h = math.ceil(math.log2(spec.m))
    rng = np.random.default_rng(spec.seed)
    hyperplanes = rng.standard_normal((h, dim))
    bits = (vectors @ hyperplanes.T) >= 0.0
    codes = bits @ (1 << np.arange(h))
    return _single(codes % spec.m, spec.m, "randomization")


def kmeans(vectors: np.ndarray, k: int, seed: int, max_iter: int = 100,
           tol: float = 1e-6) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Seeded K-means with k-means++ initialization.

    Returns (labels, centroids, objective_history) where the history is
    the sum of squared distances measured after each assignment step; it
    is non-increasing. Empty clusters are re-seeded with the point
    farthest from its own centroid.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    n = vectors.shape[0]
    if k > n:
        raise DegenerateInput(f"k={k} exceeds {n} points")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, vectors.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = vectors[first]
    closest_sq = np.sum((vectors - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = closest_sq.sum()
        if total <= 0.0:
            centroids[j] = vectors[int(rng.integers(n))]
            continue
        probs = closest_sq / total
        idx = int(rng.choice(n, p=probs))
        centroids[j] = vectors[idx]
        closest_sq = np.minimum(closest_sq, np.sum((vectors - centroids[j]) ** 2, axis=1))

    history: list[float] = []
    labels = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        dists = np.sum((vectors[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        labels = np.argmin(dists, axis=1)
        history.append(float(dists[np.arange(n), labels].sum()))

        new_centroids = centroids.copy()
        for j in range(k):
            mask = labels == j
            if mask.any():
                new_centroids[j] = vectors[mask].mean(axis=0)
        empty = [j for j in range(k) if not (labels == j).any()]
        if empty:
            own_dist = np.sum((vectors - new_centroids[labels]) ** 2, axis=1)
            for j in empty:
                far = int(np.argmax(own_dist))
                new_centroids[j] = vectors[far]
                own_dist[far] = -1.0  # don't reuse the same point

        shift = float(np.linalg.norm(new_centroids - centroids))
        centroids = new_centroids
        if shift < tol:
            break

    dists = np.sum((vectors[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    labels = np.argmin(dists, axis=1)
    history.append(float(dists[np.arange(n), labels].sum()))
    return labels, centroids, history


def partition_clustering(vectors: np.ndarray, spec: PartitionSpec) -> PartitionAssignment:
    """K-means with k = M. When every vector is identical and M > 1 the
    problem is degenerate; items fall back to round-robin with a warning."""
    vectors = np.asarray(vectors, dtype=np.float64)
    n = vectors.shape[0]
    if spec.m == 1:
        return _single(np.zeros(n, dtype=int), 1, "clustering")
    if np.allclose(vectors, vectors[0], atol=0.0):
        labels = np.arange(n) % spec.m
        return _single(labels, spec.m, "clustering",
                       warning="degenerate input: identical vectors, round-robin fallback")
    labels, _, _ = kmeans(vectors, spec.m, spec.seed)
    return _single(labels, spec.m, "clustering")


def hnsw_base_adjacency(vectors: np.ndarray, params: HnswParams,
                        seed: int) -> np.ndarray:
    """Symmetric 0/1 adjacency of the HNSW base layer (an edge exists when
    either endpoint lists the other). The base layer contains all nodes."""
    vectors = np.asarray(vectors, dtype=np.float64)
    n = vectors.shape[0]
    graph = HnswGraph(vectors.shape[1], params, seed=seed)
    for i in range(n):
        graph.insert(i, vectors[i])
    adj = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in graph.neighbors_at(i, 0):
            adj[i, j] = 1.0
            adj[j, i] = 1.0
    return adj


def normalized_laplacian(adjacency: np.ndarray) -> np.ndarray:
    """L = I - D^{-1/2} A D^{-1/2}; isolated nodes get a zero scaling row."""
    adjacency = np.asarray(adjacency, dtype=np.float64)
    degrees = adjacency.sum(axis=1)
    inv_sqrt = np.where(degrees > 0, 1.0 / np.sqrt(np.where(degrees > 0, degrees, 1.0)), 0.0)
    scaled = adjacency * inv_sqrt[:, None] * inv_sqrt[None, :]
    return np.eye(adjacency.shape[0]) - scaled


def spectral_partition(adjacency: np.ndarray, m: int, seed: int) -> PartitionAssignment:
    """Normalized-cut partitioning: K-means over the rows of the M
    smallest-eigenvalue eigenvectors of the normalized Laplacian. A graph
    with M connected components separates exactly."""
    n = adjacency.shape[0]
    if n > SPECTRAL_DENSE_CAP:
        raise TooLarge(f"{n} nodes exceeds the dense eigensolver cap {SPECTRAL_DENSE_CAP}")
    if m == 1:
        return _single(np.zeros(n, dtype=int), 1, "indexing")
    laplacian = normalized_laplacian(adjacency)
    eigenvalues, eigenvectors = np.linalg.eigh(laplacian)
    embedding = eigenvectors[:, :m]
    labels, _, _ = kmeans(embedding, m, seed)
    return _single(labels, m, "indexing")


def partition_indexing(vectors: np.ndarray, spec: PartitionSpec,
                       hnsw_params: HnswParams | None = None) -> PartitionAssignment:
    """Spectral clustering on the navigable-graph base layer."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.shape[0] > SPECTRAL_DENSE_CAP:
        raise TooLarge(
            f"{vectors.shape[0]} items exceeds the dense eigensolver cap {SPECTRAL_DENSE_CAP}")
    params = hnsw_params or HnswParams(seed=spec.seed)
    adjacency = hnsw_base_adjacency(vectors, params, seed=spec.seed)
    return spectral_partition(adjacency, spec.m, spec.seed)


def partition_category(pairs: list[TextPair], spec: PartitionSpec) -> PartitionAssignment:
    """Assign each pair to the partition of each of its category labels.

    The category -> id mapping is lexicographic; the distinct category
    count must equal M. Items may belong to several partitions."""
    categories: set[str] = set()
    for i, pair in enumerate(pairs):
        if not pair.categories:
            raise MissingCategories(f"pair {i} has no categories")
        categories.update(pair.categories)
    if len(categories) != spec.m:
        raise CategoryCountMismatch(
            f"{len(categories)} distinct categories, expected m={spec.m}")
    mapping = {cat: pid for pid, cat in enumerate(sorted(categories))}
    assignments = {
        i: frozenset(mapping[c] for c in pair.categories)
        for i, pair in enumerate(pairs)
    }
    return PartitionAssignment(assignments=assignments, m=spec.m, strategy="category")


def assign_partitions(spec: PartitionSpec, vectors: np.ndarray | None = None,
                      pairs: list[TextPair] | None = None,
                      hnsw_params: HnswParams | None = None) -> PartitionAssignment:
    """Dispatch to the strategy named by the spec."""
    if spec.strategy == "category":
        if pairs is None:
            raise ValueError("category strategy requires text pairs")
        return partition_category(pairs, spec)
    if vectors is None:
        raise ValueError(f"{spec.strategy} strategy requires vectors")
    if spec.strategy == "randomization":
        return partition_randomization(vectors, spec)
    if spec.strategy == "clustering":
        return partition_clustering(vectors, spec)
    if spec.strategy == "indexing":
        return partition_indexing(vectors, spec, hnsw_params)
    raise ValueError(f"unknown strategy {spec.strategy!r}")


def task_defaults(task: str) -> PartitionSpec:
    """Per-task default strategy and partition count."""
    defaults = {
        "summarization": ("indexing", 4),
        "translation": ("randomization", 3),
        "dialogue": ("category", 10),
    }
    if task not in defaults:
        raise ValueError(f"unknown task {task!r}")
    strategy, m = defaults[task]
    return PartitionSpec(strategy=strategy, m=m)
