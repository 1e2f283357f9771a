"""Density-peaks token selection over k-nearest-neighbor statistics.

Centers are tokens that are both locally dense and far from any denser token;
every other token joins its nearest center. All arithmetic runs in float64
regardless of the runtime dtype, and every tie (neighbor choice, density
order, score order, assignment) resolves toward the lower index, so the whole
pipeline is a deterministic function of the feature matrix.

Summation orders are part of the contract because tests compare against
brute-force oracles for exact equality: squared distances accumulate over
feature dimensions in ascending order, and each token's neighbor distances
accumulate in ascending sorted-neighbor position.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ConfigurationError

__all__ = [
    "ClusterResult",
    "pairwise_sq_dists",
    "local_density",
    "distance_indicator",
    "select_centers",
    "assign",
    "cluster_tokens",
]


@dataclass
class ClusterResult:
    """Outcome of one clustering pass over N tokens into M groups."""

    rho: np.ndarray          # (N,) local densities
    delta: np.ndarray        # (N,) distance indicators
    score: np.ndarray        # (N,) rho * delta
    centers: list[int]       # M token indices, ascending
    assignment: np.ndarray   # (N,) cluster ids in [0, M)

    @property
    def num_clusters(self) -> int:
        return len(self.centers)


@njit(cache=True)
def _sq_dists_kernel(x, out):
    n, d = x.shape
    for i in range(n):
        for j in range(i + 1, n):
            acc = 0.0
            for dim in range(d):
                diff = x[i, dim] - x[j, dim]
                acc += diff * diff
            out[i, j] = acc
            out[j, i] = acc
    return out


def pairwise_sq_dists(features: np.ndarray) -> np.ndarray:
    """All-pairs squared L2 distances, accumulated dimension by dimension."""
    x = np.ascontiguousarray(features, dtype=np.float64)
    return _sq_dists_kernel(x, np.zeros((x.shape[0], x.shape[0])))


def local_density(features: np.ndarray, k: int) -> np.ndarray:
    """exp(-mean squared distance to the k nearest neighbors) per token.

    A token is never its own neighbor; equal distances prefer the lower
    index. Requires 1 <= k <= N-1.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ConfigurationError("local_density needs at least 2 tokens")
    n = x.shape[0]
    if not 1 <= k <= n - 1:
        raise ConfigurationError(f"k={k} outside [1, {n - 1}]")
    d2 = pairwise_sq_dists(x)
    masked = d2.copy()
    np.fill_diagonal(masked, np.inf)
    order = np.argsort(masked, axis=1, kind="stable")
    acc = np.zeros(n)
    rows = np.arange(n)
    for pos in range(k):
        acc += d2[rows, order[:, pos]]
    return np.exp(-(acc / k))


def _density_rank(rho: np.ndarray) -> np.ndarray:
    """rank[i] = position of token i in the strict density order (0 = densest).

    The order is rho descending with ties broken toward the lower index,
    making "denser than" a total order.
    """
    order = np.argsort(-rho, kind="stable")
    rank = np.empty(len(rho), dtype=np.int64)
    rank[order] = np.arange(len(rho))
    return rank


def distance_indicator(features: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Distance to the nearest strictly-denser token, per the density order.

    The single maximal token instead gets its distance to the farthest other
    token.
    """
    x = np.asarray(features, dtype=np.float64)
    d = np.sqrt(pairwise_sq_dists(x))
    rank = _density_rank(np.asarray(rho, dtype=np.float64))
    denser = rank[None, :] < rank[:, None]
    candidates = np.where(denser, d, np.inf)
    delta = candidates.min(axis=1)
    top = int(np.argmin(rank))
    others = np.delete(d[top], top)
    delta[top] = others.max() if others.size else 0.0
    return delta


def select_centers(rho: np.ndarray, delta: np.ndarray, m: int) -> list[int]:
    """Indices of the m largest rho*delta scores, ties to the lower index."""
    score = np.asarray(rho, dtype=np.float64) * np.asarray(delta, dtype=np.float64)
    n = score.shape[0]
    if not 1 <= m <= n:
        raise ConfigurationError(f"center count {m} outside [1, {n}]")
    picked = np.argsort(-score, kind="stable")[:m]
    return sorted(int(i) for i in picked)


def assign(features: np.ndarray, centers: list[int]) -> np.ndarray:
    """Nearest-center id per token; ties prefer the lower center index.

    Centers always map to their own cluster, even when another center sits
    at distance zero.
    """
    if not centers:
        raise ConfigurationError("assign needs at least one center")
    x = np.asarray(features, dtype=np.float64)
    d2 = pairwise_sq_dists(x)[:, centers]
    ids = np.argmin(d2, axis=1).astype(np.int64)
    for cid, tok in enumerate(centers):
        ids[tok] = cid
    return ids


def cluster_tokens(features: np.ndarray, k: int, m: int) -> ClusterResult:
    """Full pass: density -> indicator -> centers -> assignment."""
    rho = local_density(features, k)
    delta = distance_indicator(features, rho)
    centers = select_centers(rho, delta, m)
    ids = assign(features, centers)
    return ClusterResult(rho=rho, delta=delta, score=rho * delta,
                         centers=centers, assignment=ids)


def singleton_cluster(n: int = 1) -> ClusterResult:
    """Degenerate result for token sets too small to cluster (N == 1)."""
    return ClusterResult(rho=np.ones(n), delta=np.zeros(n), score=np.zeros(n),
                         centers=[0], assignment=np.zeros(n, dtype=np.int64))
