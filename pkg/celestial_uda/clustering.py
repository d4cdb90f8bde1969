"""Complete-linkage agglomeration and Lloyd K-Means on small row sets."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import pairwise_cosine_distances

_LOGGER = logging.getLogger(__name__)


def _relabel(slots: np.ndarray) -> list[int]:
    """Map slot ids to 0..G-1 in order of first appearance."""
    mapping: dict[int, int] = {}
    labels = []
    for slot in slots.tolist():
        if slot not in mapping:
            mapping[slot] = len(mapping)
        labels.append(mapping[slot])
    return labels


def _merge_closest(linkage: np.ndarray, slots: np.ndarray) -> float:
    """Merge the closest active pair in place and return its linkage distance.

    A merged cluster keeps the lower slot index. Ties resolve to the first
    pair in row-major order.
    """
    i, j = np.unravel_index(int(np.argmin(linkage)), linkage.shape)
    i, j = (int(i), int(j)) if i < j else (int(j), int(i))
    distance = float(linkage[i, j])
    # Complete linkage: distance to the union is the max of the two.
    merged = np.maximum(linkage[i], linkage[j])
    linkage[i, :] = merged
    linkage[:, i] = merged
    linkage[i, i] = np.inf
    linkage[j, :] = np.inf
    linkage[:, j] = np.inf
    slots[slots == j] = i
    return distance


def _initial_linkage(x: np.ndarray) -> np.ndarray:
    linkage = pairwise_cosine_distances(x)
    np.fill_diagonal(linkage, np.inf)
    return linkage


def agglomerate_by_threshold(x: np.ndarray, threshold: float) -> list[int]:
    """Merge until the closest complete-linkage distance exceeds `threshold`."""
    n = len(x)
    if n == 0:
        return []
    if n == 1:
        return [0]
    linkage = _initial_linkage(x)
    slots = np.arange(n)
    for _ in range(n - 1):
        if float(linkage.min()) > threshold:
            break
        _merge_closest(linkage, slots)
    return _relabel(slots)


def agglomerate_to_count(x: np.ndarray, n_clusters: int) -> list[int]:
    """Merge until exactly `n_clusters` clusters remain."""
    n = len(x)
    if n_clusters < 1 or n_clusters > n:
        raise ValueError(f"Cannot form {n_clusters} clusters from {n} rows")
    slots = np.arange(n)
    if n_clusters == n:
        return _relabel(slots)
    linkage = _initial_linkage(x)
    for _ in range(n - n_clusters):
        _merge_closest(linkage, slots)
    return _relabel(slots)


@dataclass
class KMeansResult:
    labels: list[int]
    centroids: np.ndarray
    inertia_history: list[float] = field(default_factory=list)
    iterations: int = 0

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1] if self.inertia_history else 0.0


def _squared_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _farthest_point_init(x: np.ndarray, k: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(len(x)))]
    closest = _squared_distances(x, x[chosen])[:, 0]
    while len(chosen) < k:
        nxt = int(np.argmax(closest))
        chosen.append(nxt)
        closest = np.minimum(closest, _squared_distances(x, x[[nxt]])[:, 0])
    return x[chosen].copy()


def kmeans(x: np.ndarray, k: int, max_iter: int = 50, seed: int = 0) -> KMeansResult:
    """Lloyd's algorithm with deterministic farthest-point initialization."""
    x = np.asarray(x, dtype=np.float64)
    if k < 1 or k > len(x):
        raise ValueError(f"Cannot form {k} clusters from {len(x)} rows")
    centroids = _farthest_point_init(x, k, seed)
    labels = np.full(len(x), -1)
    history: list[float] = []
    iterations = 0
    for iterations in range(1, max_iter + 1):
        new_labels = np.argmin(_squared_distances(x, centroids), axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            members = labels == c
            if members.any():
                centroids[c] = x[members].mean(axis=0)
        history.append(
            float(_squared_distances(x, centroids)[np.arange(len(x)), labels].sum())
        )
    else:
        _LOGGER.debug("K-Means stopped at max_iter=%d before converging", max_iter)
    return KMeansResult(
        labels=labels.tolist(),
        centroids=centroids,
        inertia_history=history,
        iterations=iterations,
    )
