"""Codebook construction: seeded k-means and the decoupled assignment parameters."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Codebook:
    """Codewords ``centers`` (K, D) plus assignment parameters ``s`` (K, D), ``h`` (K,).

    ``alpha`` only enters through :func:`init_decoupled`; afterwards ``s``, ``h``
    and ``centers`` are trained independently.
    """

    centers: np.ndarray
    s: np.ndarray
    h: np.ndarray
    alpha: float

    def __post_init__(self):
        if self.centers.ndim != 2 or min(self.centers.shape) < 1:
            raise ValueError(f"centers must be a non-empty (K, D) array, got {self.centers.shape}")
        if self.s.shape != self.centers.shape:
            raise ValueError(f"s has shape {self.s.shape}, expected {self.centers.shape}")
        if self.h.shape != (self.K,):
            raise ValueError(f"h has shape {self.h.shape}, expected ({self.K},)")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")

    @property
    def K(self):
        return self.centers.shape[0]

    @property
    def D(self):
        return self.centers.shape[1]


def init_decoupled(centers, alpha=100.0) -> Codebook:
    """``s_k = 2 alpha b_k`` and ``h_k = -alpha ||b_k||^2``."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    centers = np.array(centers, copy=True)
    s = 2 * alpha * centers
    h = -alpha * (centers * centers).sum(axis=1)
    return Codebook(centers, s, h, float(alpha))


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    inertia: float
    history: list = field(default_factory=list)
    n_iter: int = 0


def _sq_dists(x, centers):
    x2 = (x * x).sum(axis=1)[:, None]
    c2 = (centers * centers).sum(axis=1)[None, :]
    return np.maximum(x2 - 2 * x @ centers.T + c2, 0)


def _kmeanspp(x, K, rng):
    N = x.shape[0]
    chosen = [int(rng.integers(N))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(N, p=d2 / total))
        else:
            # every point coincides with a chosen center
            nxt = int(rng.integers(N))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(axis=1))
    return x[chosen].copy()


def _assign(x, centers):
    labels = _sq_dists(x, centers).argmin(axis=1)
    resid = x - centers[labels]
    per_point = (resid * resid).sum(axis=1)
    return labels, per_point


def kmeans(descriptors, K, seed=0, max_iters=100, tol=1e-6) -> KMeansResult:
    """Lloyd iterations from k-means++ seeding.

    Stops once the relative inertia decrease drops below ``tol``. A cluster that
    ends up empty is moved onto the descriptor farthest from its current center.
    """
    x = np.asarray(descriptors)
    if x.ndim != 2:
        raise ValueError(f"descriptors must be (N, D), got shape {x.shape}")
    N = x.shape[0]
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if N < K:
        raise ValueError(f"need at least K={K} descriptors, got {N}")
    if not np.all(np.isfinite(x)):
        bad = int(np.argmax(~np.isfinite(x).all(axis=1)))
        raise ValueError(f"non-finite descriptor at row {bad}")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(x, K, rng)
    labels, per_point = _assign(x, centers)
    inertia = float(per_point.sum())
    history = [inertia]
    it = 0
    for it in range(1, max_iters + 1):
        counts = np.bincount(labels, minlength=K)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not nonempty.all():
            taken = per_point.copy()
            for k in np.flatnonzero(~nonempty):
                far = int(np.argmax(taken))
                centers[k] = x[far]
                taken[far] = -1.0
        labels, per_point = _assign(x, centers)
        new = float(per_point.sum())
        history.append(new)
        done = new == 0 or (inertia - new) <= tol * max(inertia, np.finfo(float).tiny)
        inertia = new
        if done:
            break
    return KMeansResult(centers, labels, inertia, history, it)


def kmeans_fit(descriptors, K, seed=0, max_iters=100, tol=1e-6):
    return kmeans(descriptors, K, seed=seed, max_iters=max_iters, tol=tol).centers
