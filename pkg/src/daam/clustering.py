"""k-means++ clustering of target embeddings, weak labels, confidence weights.

Weak label = index of the nearest center (squared Euclidean distance,
ties to the lowest index). Confidence weight = 1 / (1 + exp(d^2)), a
descending function of the distance to the assigned center, so weights
live in (0, 0.5].
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError

_EXP_CAP = 700.0
_WEIGHT_FLOOR = 1e-30


@dataclass
class ClusterModel:
    k: int
    centers: np.ndarray     # (k, d)
    labels: np.ndarray      # (n,) int
    weights: np.ndarray     # (n,) float in (0, 0.5]
    inertia: float
    seed: int
    inertia_history: list = None  # inertia at each assignment step

    def to_json(self) -> str:
        return json.dumps({
            "k": self.k,
            "centers": self.centers.tolist(),
            "labels": self.labels.tolist(),
            "weights": self.weights.tolist(),
            "inertia": self.inertia,
            "seed": self.seed,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ClusterModel":
        d = json.loads(text)
        return cls(k=d["k"], centers=np.asarray(d["centers"]),
                   labels=np.asarray(d["labels"], dtype=int),
                   weights=np.asarray(d["weights"]),
                   inertia=d["inertia"], seed=d["seed"])


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(n, k) squared Euclidean distances."""
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _seed_centers(points: np.ndarray, k: int, rng: np.random.Generator):
    """k-means++ seeding: first uniform, rest proportional to D^2."""
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centers[i] = points[rng.integers(n)]
        else:
            centers[i] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((points - centers[i]) ** 2, axis=1))
    return centers


def kmeans_pp(points, k: int, seed: int, max_iter: int = 100,
              tol: float = 1e-6, n_restarts: int = 10) -> ClusterModel:
    """k-means++ seeding followed by Lloyd iterations, best of `n_restarts`.

    Empty clusters are re-seeded to the point farthest from its current
    center. Inertia is non-increasing across Lloyd iterations within one
    restart; the restart with the lowest final inertia wins. Deterministic
    given `seed`.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ConfigError(f"points must be (n, d), got shape {points.shape}")
    n = points.shape[0]
    if k < 1:
        raise ConfigError("k must be >= 1")
    if n < k:
        raise ConfigError(f"cannot form {k} clusters from {n} points")
    if not np.all(np.isfinite(points)):
        raise NumericError("non-finite point passed to kmeans_pp")

    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_restarts)):
        model = _single_run(points, k, rng, max_iter, tol, seed)
        if best is None or model.inertia < best.inertia:
            best = model
    return best


def _single_run(points, k, rng, max_iter, tol, seed) -> ClusterModel:
    n = points.shape[0]
    centers = _seed_centers(points, k, rng)
    labels = np.zeros(n, dtype=int)
    history = []
    for _ in range(max_iter):
        d2 = _sq_dists(points, centers)
        labels = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(n), labels].sum()))
        new_centers = centers.copy()
        for j in range(k):
            mask = labels == j
            if mask.any():
                new_centers[j] = points[mask].mean(axis=0)
        # re-seed empty clusters to the worst-represented point
        point_d2 = d2[np.arange(n), labels]
        for j in range(k):
            if not (labels == j).any():
                far = int(np.argmax(point_d2))
                new_centers[j] = points[far]
                point_d2[far] = 0.0
        shift = np.sqrt(np.sum((new_centers - centers) ** 2, axis=1)).max()
        centers = new_centers
        if shift < tol:
            break

    d2 = _sq_dists(points, centers)
    labels = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(n), labels].sum())
    history.append(inertia)
    weights = confidence_weights(points, centers, labels)
    return ClusterModel(k=k, centers=centers, labels=labels,
                        weights=weights, inertia=inertia, seed=seed,
                        inertia_history=history)


def assign_weak_label(f_sh: np.ndarray, centers: np.ndarray) -> int:
    """Nearest center by squared distance; ties broken by lowest index."""
    d2 = np.sum((centers - f_sh) ** 2, axis=1)
    return int(np.argmin(d2))


def confidence_weight(f_sh: np.ndarray, center: np.ndarray) -> float:
    d2 = float(np.sum((f_sh - center) ** 2))
    w = 1.0 / (1.0 + np.exp(min(d2, _EXP_CAP)))
    return max(w, _WEIGHT_FLOOR)


def confidence_weights(points: np.ndarray, centers: np.ndarray,
                       labels: np.ndarray) -> np.ndarray:
    d2 = np.sum((points - centers[labels]) ** 2, axis=1)
    w = 1.0 / (1.0 + np.exp(np.minimum(d2, _EXP_CAP)))
    return np.maximum(w, _WEIGHT_FLOOR)


def relabel_dataset(features, k: int, seed: int, max_iter: int = 100,
                    tol: float = 1e-6) -> ClusterModel:
    """Cluster target features and attach a weak label + weight per sample."""
    return kmeans_pp(features, k, seed, max_iter=max_iter, tol=tol)


def default_cluster_count(n_target_identities: int) -> int:
    """Paper-scale ratio of clusters to target identities (650 : 751)."""
    return max(1, round(650 / 751 * n_target_identities))
