"""Lloyd k-means with k-means++ seeding, shared by the quantizer and the partitioner."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from distann import kernels


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    mse_history: list[float] = field(default_factory=list)

    @property
    def mse(self) -> float:
        return self.mse_history[-1]


def kmeanspp_init(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = data.shape[0]
    centroids = np.empty((k, data.shape[1]), dtype=np.float32)
    first = int(rng.integers(n))
    centroids[0] = data[first]
    closest = kernels.l2_to_rows(data, centroids[0]).astype(np.float64)
    for c in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # every point already coincides with a centroid
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centroids[c] = data[idx]
        np.minimum(closest, kernels.l2_to_rows(data, centroids[c]), out=closest)
    return centroids


def kmeans(data: np.ndarray, k: int, iters: int = 15, seed: int = 0) -> KMeansResult:
    """Fixed-iteration Lloyd; empty clusters are reseeded from the farthest point.

    ``mse_history[i]`` is the mean squared quantization error after ``i + 1``
    update steps (history[0] is measured right after seeding).
    """
    data = np.ascontiguousarray(data, dtype=np.float32)
    n = data.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    rng = np.random.default_rng(seed)
    centroids = kmeanspp_init(data, k, rng)
    labels, dists = kernels.assign_nearest(data, centroids)
    history = [float(dists.astype(np.float64).mean())]
    for _ in range(iters):
        sums, counts = kernels.centroid_sums(data, labels, k)
        nonempty = counts > 0
        centroids[nonempty] = (sums[nonempty] / counts[nonempty, None]).astype(np.float32)
        if not nonempty.all():
            # reseed each empty cluster with the currently worst-served point
            d = dists.astype(np.float64).copy()
            for c in np.flatnonzero(~nonempty):
                far = int(np.argmax(d))
                centroids[c] = data[far]
                d[far] = -1.0
        labels, dists = kernels.assign_nearest(data, centroids)
        history.append(float(dists.astype(np.float64).mean()))
    return KMeansResult(centroids, labels, history)
