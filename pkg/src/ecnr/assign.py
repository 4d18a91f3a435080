"""Grouping effective blocks into near-equal-size clusters, one per MLP.

Standard k-means gives content-similar but size-imbalanced clusters; the
uniformization pass reassigns points in priority order (largest spread
between nearest and farthest centroid first) so every cluster ends with
floor(n/k) or ceil(n/k) members.  Centroids are not refit afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Assignment:
    scale: int
    m: int
    cluster_of: np.ndarray  # MLP id per effective block, raster order
    within_cluster_index: np.ndarray  # slot of each block inside its cluster

    @property
    def n_blocks(self) -> int:
        return self.cluster_of.size

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.cluster_of, minlength=self.m)

    @property
    def max_slots(self) -> int:
        return int(self.cluster_sizes.max()) if self.m else 0

    def slot_rows(self, slot: int) -> np.ndarray:
        """Block indices holding this slot, one per participating cluster."""
        return np.flatnonzero(self.within_cluster_index == slot)


def _sq_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    p2 = (points * points).sum(axis=1)[:, None]
    c2 = (centroids * centroids).sum(axis=1)[None, :]
    d = p2 - 2.0 * points @ centroids.T + c2
    np.maximum(d, 0.0, out=d)
    return d


def _plusplus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d.sum()
        if total <= 0:
            centroids[j] = points[rng.integers(n)]
            continue
        centroids[j] = points[rng.choice(n, p=d / total)]
        d = np.minimum(d, ((points - centroids[j]) ** 2).sum(axis=1))
    return centroids


def kmeans(
    points: np.ndarray, k: int, max_iters: int = 50, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding; deterministic per seed."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n == 0:
        raise ValueError("kmeans: empty input")
    if k > n:
        raise ValueError(f"kmeans: k={k} exceeds point count {n}")
    if k < 1:
        raise ValueError(f"kmeans: k must be >= 1, got {k}")
    rng = np.random.default_rng(seed)
    centroids = _plusplus_init(points, k, rng)
    labels = np.full(n, -1)
    for _ in range(max_iters):
        d = _sq_distances(points, centroids)
        new_labels = d.argmin(axis=1)
        for j in range(k):
            members = new_labels == j
            if members.any():
                centroids[j] = points[members].mean(axis=0)
            else:
                # re-seed an empty cluster from the worst-fit point
                worst = int(d[np.arange(n), new_labels].argmax())
                centroids[j] = points[worst]
                new_labels[worst] = j
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return labels, centroids


def reassignment_priority(
    points: np.ndarray, centroids: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Processing order for the rebalancing pass and its gain values.

    A point's gain is the spread between its farthest and nearest centroid
    (squared distances); points are handled in descending gain order, ties
    broken by point index.
    """
    d = _sq_distances(points, centroids)
    gain = d.max(axis=1) - d.min(axis=1)
    order = np.argsort(-gain, kind="stable")
    return order, gain


def kmeans_uniform(
    points: np.ndarray, k: int, seed: int = 0, max_iters: int = 50
) -> tuple[np.ndarray, np.ndarray]:
    """Cluster, then rebalance so every cluster has floor(n/k) or ceil(n/k) points."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    _, centroids = kmeans(points, k, max_iters=max_iters, seed=seed)

    d = _sq_distances(points, centroids)
    order, _ = reassignment_priority(points, centroids)
    pref = np.argsort(d, axis=1, kind="stable")

    lo = n // k
    hi = -(-n // k)
    sizes = np.zeros(k, dtype=np.int64)
    labels = np.full(n, -1, dtype=np.int64)
    for i in order:
        chosen = -1
        for j in pref[i]:
            if sizes[j] < lo:
                chosen = j
                break
        if chosen < 0:
            for j in pref[i]:
                if sizes[j] < hi:
                    chosen = j
                    break
        labels[i] = chosen
        sizes[chosen] += 1
    return labels, centroids


def assign_blocks(
    features: np.ndarray, blocks_per_mlp: int, seed: int = 0, scale: int = 1
) -> Assignment:
    """Assign n blocks to ceil(n / blocks_per_mlp) MLPs by balanced clustering.

    ``features`` holds one flattened voxel vector per effective block in
    raster order.  Slots within a cluster follow ascending block index, which
    is how the decoder reconstructs them from the stored assignment array.
    """
    n = features.shape[0]
    if n == 0:
        return Assignment(scale, 0, np.zeros(0, np.int64), np.zeros(0, np.int64))
    m = -(-n // blocks_per_mlp)
    if m == 1:
        labels = np.zeros(n, dtype=np.int64)
    elif m == n:
        labels = np.arange(n, dtype=np.int64)
    else:
        labels, _ = kmeans_uniform(features, m, seed=seed)
    return Assignment(scale, m, labels, slots_for(labels, m))


def slots_for(cluster_of: np.ndarray, m: int) -> np.ndarray:
    """Within-cluster slot = rank of the block (by index) inside its cluster."""
    slots = np.zeros(cluster_of.size, dtype=np.int64)
    counts = np.zeros(m, dtype=np.int64)
    for i, c in enumerate(cluster_of):
        slots[i] = counts[c]
        counts[c] += 1
    return slots
