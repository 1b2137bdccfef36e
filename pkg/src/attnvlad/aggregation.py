"""Soft assignment and pooling layers (VLAD, BoW, GAP), optionally attention-weighted.

Descriptors may be passed either as a feature map ``(W, H, D)`` or already
flattened to ``(N, D)``; spatial locations are enumerated in row-major order.
Every forward function has a ``*_backward`` partner returning gradients for
each differentiable input.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codebook import Codebook
from .errors import ShapeError
from .numerics import l2_normalize, l2_normalize_backward, softmax, softmax_backward

NORM_EPS = 1e-12
MODES = ("direct", "decoupled")


@dataclass
class PooledVector:
    kind: str  # "vlad" | "bow" | "gap"
    v: np.ndarray
    normalized: bool


def as_descriptors(X):
    X = np.asarray(X)
    if X.ndim == 3:
        return X.reshape(-1, X.shape[2])
    if X.ndim != 2:
        raise ShapeError("descriptors", "rank", "2 or 3", X.ndim)
    return X


def check_weights(weights, N, atol=1e-6):
    w = np.asarray(weights)
    if w.shape != (N,):
        raise ValueError(f"weights must have shape ({N},), got {w.shape}")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    total = float(w.sum())
    if abs(total - 1) > atol:
        raise ValueError(f"weights must sum to 1, got {total:.8g}")
    return w


# ---------------------------------------------------------------------------
# Soft assignment
# ---------------------------------------------------------------------------


def assignment_logits(X, cb: Codebook, mode="decoupled"):
    x = as_descriptors(X)
    if x.shape[1] != cb.D:
        raise ShapeError("soft_assign", "descriptor dim", cb.D, x.shape[1])
    if mode == "direct":
        diff = x[:, None, :] - cb.centers[None, :, :]
        return -cb.alpha * (diff * diff).sum(axis=2)
    if mode == "decoupled":
        return x @ cb.s.T + cb.h
    raise ValueError(f"unknown assignment mode {mode!r}; expected one of {MODES}")


def soft_assign(X, cb: Codebook, mode="decoupled"):
    """Soft assignment ``a[i, k]`` of each descriptor to each codeword, rows summing to 1.

    ``direct`` uses ``-alpha * ||x_i - b_k||^2`` as logits, ``decoupled`` uses
    ``s_k . x_i + h_k``. Both are max-shifted before exponentiation.
    """
    return softmax(assignment_logits(X, cb, mode), axis=1)


def soft_assign_backward(X, cb: Codebook, a, d_a, mode="decoupled"):
    """Returns ``(d_x, grads)`` where ``grads`` maps ``centers`` or ``s``/``h`` to arrays."""
    x = as_descriptors(X)
    d_z = softmax_backward(a, d_a, axis=1)
    if mode == "direct":
        diff = x[:, None, :] - cb.centers[None, :, :]
        # dz/dx = -2 alpha (x - b), dz/db = +2 alpha (x - b)
        g = (-2 * cb.alpha) * d_z[:, :, None] * diff
        return g.sum(axis=1), {"centers": -g.sum(axis=0)}
    d_x = d_z @ cb.s
    return d_x, {"s": d_z.T @ x, "h": d_z.sum(axis=0)}


# ---------------------------------------------------------------------------
# VLAD
# ---------------------------------------------------------------------------


def vlad_aggregate(X, a, cb: Codebook, weights=None, validate=True):
    """Per-codeword residual sums, shape ``(K, D)``.

    ``v_k = sum_i w_i a_ik (x_i - b_k)``; without weights every ``w_i`` is 1.
    """
    x = as_descriptors(X)
    return vlad_residuals(x, a, cb.centers, weights, validate)


def vlad_residuals(x, a, centers, weights=None, validate=True):
    N = x.shape[0]
    if a.shape != (N, centers.shape[0]):
        raise ShapeError("vlad_aggregate", "assignment shape", (N, centers.shape[0]), a.shape)
    if x.shape[1] != centers.shape[1]:
        raise ShapeError("vlad_aggregate", "descriptor dim", centers.shape[1], x.shape[1])
    c = a
    if weights is not None:
        if validate:
            check_weights(weights, N)
        c = weights[:, None] * a
    # explicit residuals keep v exactly invariant to a shared shift of x and b
    resid = x[:, None, :] - centers[None, :, :]
    return np.einsum("nk,nkd->kd", c, resid)


def vlad_residuals_backward(x, a, centers, weights, d_raw):
    """Returns ``(d_x, d_a, d_centers, d_weights)``; ``d_weights`` is None when unweighted."""
    c = a if weights is None else weights[:, None] * a
    d_x = c @ d_raw
    d_centers = -c.sum(axis=0)[:, None] * d_raw
    # dc_ik = d_raw_k . (x_i - b_k)
    d_c = x @ d_raw.T - (centers * d_raw).sum(axis=1)[None, :]
    if weights is None:
        return d_x, d_c, d_centers, None
    return d_x, weights[:, None] * d_c, d_centers, (a * d_c).sum(axis=1)


def _block_norms(raw):
    norms = np.sqrt((raw * raw).sum(axis=1, keepdims=True))
    total = np.sqrt((norms * norms).sum())
    return norms, (norms < NORM_EPS * total) | (total < NORM_EPS)


def normalize_vlad(raw) -> PooledVector:
    """Intra-normalize each codeword block, concatenate, then L2-normalize the whole.

    A raw vector with norm below 1e-12 stays zero. A block stays zero when its
    norm is below 1e-12 of the whole raw norm, so the result ignores any
    positive rescaling of ``raw`` (uniform weights included).
    """
    norms, zero = _block_norms(raw)
    safe = np.where(zero, 1, norms)
    intra = np.where(zero, 0, raw / safe)
    return PooledVector("vlad", l2_normalize(intra.reshape(-1), NORM_EPS), True)


def normalize_vlad_backward(raw, d_v):
    norms, zero = _block_norms(raw)
    safe = np.where(zero, 1, norms)
    intra = np.where(zero, 0, raw / safe)
    d_intra = l2_normalize_backward(intra.reshape(-1), d_v, NORM_EPS).reshape(raw.shape)
    y = intra
    d_raw = (d_intra - y * (y * d_intra).sum(axis=1, keepdims=True)) / safe
    return np.where(zero, 0, d_raw)


# ---------------------------------------------------------------------------
# BoW and GAP
# ---------------------------------------------------------------------------


def bow_histogram(a, weights=None, validate=True):
    if weights is None:
        return a.sum(axis=0)
    if validate:
        check_weights(weights, a.shape[0])
    return weights @ a


def bow_aggregate(a, weights=None, validate=True) -> PooledVector:
    """Soft-assignment histogram, globally L2-normalized."""
    return PooledVector("bow", l2_normalize(bow_histogram(a, weights, validate), NORM_EPS), True)


def bow_aggregate_backward(a, weights, d_v):
    """Returns ``(d_a, d_weights)``."""
    hist = bow_histogram(a, weights, validate=False)
    d_hist = l2_normalize_backward(hist, d_v, NORM_EPS)
    if weights is None:
        return np.broadcast_to(d_hist, a.shape).copy(), None
    return weights[:, None] * d_hist[None, :], a @ d_hist


def gap_aggregate(X, weights=None, validate=True) -> PooledVector:
    """Spatial mean, or ``sum_i w_i x_i`` when weights are given. Not normalized."""
    x = as_descriptors(X)
    if weights is None:
        return PooledVector("gap", x.mean(axis=0), False)
    if validate:
        check_weights(weights, x.shape[0])
    return PooledVector("gap", weights @ x, False)


def gap_aggregate_backward(X, weights, d_v):
    """Returns ``(d_x, d_weights)`` with ``d_x`` flattened to ``(N, D)``."""
    x = as_descriptors(X)
    N = x.shape[0]
    if weights is None:
        return np.broadcast_to(d_v / N, x.shape).copy(), None
    return weights[:, None] * d_v[None, :], x @ d_v


# ---------------------------------------------------------------------------
# Two-image construction for the residual-direction argument
# ---------------------------------------------------------------------------


def cosine(u, v):
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < NORM_EPS or nv < NORM_EPS:
        return 0.0
    return float(u @ v / (nu * nv))


def opposite_distractor_pair():
    """Two same-class images whose single codeword cell holds a shared signal
    descriptor plus a distractor pointing the opposite way in each image.

    Returns ``(X1, X2, codebook, oracle_w1, oracle_w2)`` with ``X`` of shape
    ``(1, 2, 2)``: location 0 is the signal ``[1, 0]``, location 1 the
    distractor ``[-1, +3]`` in the first image and ``[-1, -3]`` in the second.
    With one codeword at the origin every assignment is exactly 1, so the
    unweighted residual sums are ``[0, 3]`` and ``[0, -3]`` (cosine -1), while
    the oracle weights keep only the signal (cosine 1).
    """
    signal = np.array([1.0, 0.0])
    X1 = np.stack([signal, [-1.0, 3.0]]).reshape(1, 2, 2)
    X2 = np.stack([signal, [-1.0, -3.0]]).reshape(1, 2, 2)
    cb = Codebook(np.zeros((1, 2)), np.zeros((1, 2)), np.zeros(1), 1.0)
    oracle = np.array([1.0, 0.0])
    return X1, X2, cb, oracle, oracle.copy()


def residual_cosines(X1, X2, cb: Codebook, w1=None, w2=None, mode="direct"):
    """Per-codeword cosine similarity between the raw VLAD blocks of two images."""
    v1 = vlad_aggregate(X1, soft_assign(X1, cb, mode), cb, w1)
    v2 = vlad_aggregate(X2, soft_assign(X2, cb, mode), cb, w2)
    return np.array([cosine(p, q) for p, q in zip(v1, v2)])
