"""Lloyd's k-means with k-means++ seeding, plus model embeddings for it."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .metrics import ClusterAssignment


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignment: ClusterAssignment
    inertia: float
    iterations: int
    restarts_used: int
    inertia_history: list = field(default_factory=list)


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    out = np.empty((len(X), len(C)))
    for k, c in enumerate(C):
        diff = X - c
        out[:, k] = np.einsum("ij,ij->i", diff, diff)
    return out


def kmeans_plusplus(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    centers = [X[rng.integers(len(X))]]
    d2 = _sq_dists(X, centers[0][None])[:, 0]
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(len(X))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, len(X) - 1)
        centers.append(X[idx])
        d2 = np.minimum(d2, _sq_dists(X, X[idx][None])[:, 0])
    return np.array(centers, dtype=np.float64)


def lloyd(X: np.ndarray, centroids: np.ndarray, max_iter: int = 300):
    """Run Lloyd iterations to an assignment fixed point.

    Returns ``(centroids, labels, inertia, iterations, inertia_history)``.
    Empty clusters are reseeded at the point farthest from its centroid.
    """
    K = len(centroids)
    C = centroids.copy()
    labels = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(X, C)
        new = np.argmin(d2, axis=1)
        counts = np.bincount(new, minlength=K)
        for k in np.flatnonzero(counts == 0):
            far = np.argmax(d2[np.arange(len(X)), new])
            new[far] = k
            d2[far] = 0.0
            counts = np.bincount(new, minlength=K)
        history.append(float(np.sum(_sq_dists(X, C)[np.arange(len(X)), new])))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for k in range(K):
            C[k] = X[labels == k].mean(axis=0)
    inertia = float(np.sum(_sq_dists(X, C)[np.arange(len(X)), labels]))
    history.append(inertia)
    return C, labels, inertia, it, history


def kmeans_fit(points, K: int, restarts: int = 10, max_iter: int = 300, seed: int = 0) -> KMeansResult:
    """Best-inertia k-means over ``restarts`` k-means++ initialisations.

    Ties in inertia go to the lowest restart index.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    X = X.reshape(len(X), -1)
    if len(X) < K:
        raise ContractError(f"k-means needs at least K={K} points, got {len(X)}")
    if K < 1 or X.shape[1] < 1:
        raise ContractError("K and the point dimension must be >= 1")
    rng = np.random.default_rng(seed)
    best = None
    for r in range(max(1, restarts)):
        C, labels, inertia, iters, hist = lloyd(X, kmeans_plusplus(X, K, rng), max_iter)
        if best is None or inertia < best.inertia:
            best = KMeansResult(C, ClusterAssignment(labels, K, "kmeans"), inertia, iters, r + 1, hist)
    best.restarts_used = max(1, restarts)
    return best


def embed_dataset(model, X, batch_size: int = 1024) -> np.ndarray:
    """Feature-extractor activations for every sample, in eval mode."""
    X = np.asarray(X, dtype=np.float64)
    was_training = model.training
    model.eval()
    try:
        parts = [model.embed(X[i:i + batch_size]) for i in range(0, len(X), batch_size)]
    finally:
        if was_training:
            model.train()
    return np.concatenate(parts, axis=0)
