"""Weighted k-means with k-means++ seeding, restarts, and deterministic
empty-cluster repair.

A single in-package implementation keeps clustering byte-reproducible across
the three places it is used (leaf vote compression, deformation clusters,
descriptor codebooks): given the same seed the assignments are identical on
every run and at every worker count.
"""

from __future__ import annotations

import numpy as np


def _pairwise_sq_dist(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _plus_plus_seed(points, weights, k, rng) -> np.ndarray:
    """k-means++ seeding with sampling probabilities scaled by weights."""
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    probs = weights / weights.sum()
    idx = rng.choice(n, p=probs)
    centers[0] = points[idx]
    closest = np.einsum("nd,nd->n", points - centers[0], points - centers[0])
    for i in range(1, k):
        scores = weights * closest
        total = scores.sum()
        if total <= 0.0:
            # All remaining mass sits on already-chosen centers; fall back to
            # a weighted draw so seeding always returns k centers.
            idx = rng.choice(n, p=probs)
        else:
            idx = rng.choice(n, p=scores / total)
        centers[i] = points[idx]
        d = np.einsum("nd,nd->n", points - centers[i], points - centers[i])
        closest = np.minimum(closest, d)
    return centers


def _lloyd(points, weights, centers, max_iter):
    """Weighted Lloyd iterations; returns (centers, labels, objective)."""
    k = centers.shape[0]
    labels = np.full(points.shape[0], -1, dtype=np.intp)
    for _ in range(max_iter):
        dist = _pairwise_sq_dist(points, centers)
        new_labels = np.argmin(dist, axis=1)
        # Empty-cluster repair: reseed from the point farthest from its
        # assigned center, one cluster at a time.
        for c in range(k):
            if not np.any(new_labels == c):
                assigned = dist[np.arange(points.shape[0]), new_labels]
                far = int(np.argmax(assigned * (weights > 0)))
                centers[c] = points[far]
                new_labels[far] = c
                dist = _pairwise_sq_dist(points, centers)
                new_labels = np.argmin(dist, axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            mask = labels == c
            wsum = weights[mask].sum()
            if wsum > 0:
                centers[c] = np.average(points[mask], axis=0, weights=weights[mask])
    dist = _pairwise_sq_dist(points, centers)
    labels = np.argmin(dist, axis=1)
    objective = float(np.sum(weights * dist[np.arange(points.shape[0]), labels]))
    return centers, labels, objective


def weighted_kmeans(
    points: np.ndarray,
    k: int,
    weights: np.ndarray | None = None,
    restarts: int = 10,
    max_iter: int = 100,
    seed: int = 0,
):
    """Best-of-restarts weighted k-means.

    Returns (centers (k, d), labels (n,), objective) for the restart with the
    lowest weighted within-cluster sum of squares. Restart i draws its rng
    from child i of ``SeedSequence(seed)``, so the first restart of a larger
    run reproduces a single-restart run exactly.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be (n, d)")
    n = points.shape[0]
    if weights is None:
        weights = np.ones(n)
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    if weights.sum() <= 0:
        raise ValueError("weights must have positive total mass")
    distinct = np.unique(points[weights > 0], axis=0).shape[0]
    if distinct < k:
        raise ValueError(
            f"need at least {k} distinct points with positive weight, "
            f"got {distinct}; use a smaller k"
        )
    best = None
    for child in np.random.SeedSequence(seed).spawn(restarts):
        rng = np.random.Generator(np.random.PCG64(child))
        centers = _plus_plus_seed(points, weights, k, rng)
        centers, labels, objective = _lloyd(points, weights, centers.copy(), max_iter)
        if best is None or objective < best[2]:
            best = (centers, labels, objective)
    return best
