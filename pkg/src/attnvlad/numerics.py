"""Dense layers with hand-written backward passes and a finite-difference checker.

Feature maps are laid out ``(W, H, D)``: two spatial axes followed by channels,
row-major with the channel axis fastest. Everything is plain numpy; precision is
whatever dtype the caller constructs its arrays with (float64 for gradient
checking, float32 for training).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError, UsageError

# ---------------------------------------------------------------------------
# Functional forward / backward pairs
# ---------------------------------------------------------------------------


def _require_rank(op, name, arr, rank):
    if arr.ndim != rank:
        raise ShapeError(op, f"{name} rank", rank, arr.ndim)


def conv2d_1x1(x, weights, bias):
    """Pointwise convolution: ``out[i,j,c] = sum_d x[i,j,d] * weights[d,c] + bias[c]``."""
    _require_rank("conv2d_1x1", "input", x, 3)
    _require_rank("conv2d_1x1", "weights", weights, 2)
    if x.shape[2] != weights.shape[0]:
        raise ShapeError("conv2d_1x1", "input channels", weights.shape[0], x.shape[2])
    if bias.shape != (weights.shape[1],):
        raise ShapeError("conv2d_1x1", "bias length", (weights.shape[1],), bias.shape)
    return x @ weights + bias


def conv2d_1x1_backward(x, weights, upstream):
    d_x = upstream @ weights.T
    d_w = x.reshape(-1, x.shape[2]).T @ upstream.reshape(-1, upstream.shape[2])
    d_b = upstream.sum(axis=(0, 1))
    return d_x, d_w, d_b


def conv2d_3x3(x, weights, bias):
    """Same-size 3x3 cross-correlation with zero padding of width 1."""
    _require_rank("conv2d_3x3", "input", x, 3)
    _require_rank("conv2d_3x3", "weights", weights, 4)
    if weights.shape[:2] != (3, 3):
        raise ShapeError("conv2d_3x3", "kernel size", (3, 3), weights.shape[:2])
    if x.shape[2] != weights.shape[2]:
        raise ShapeError("conv2d_3x3", "input channels", weights.shape[2], x.shape[2])
    if bias.shape != (weights.shape[3],):
        raise ShapeError("conv2d_3x3", "bias length", (weights.shape[3],), bias.shape)
    W, H, _ = x.shape
    padded = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    out = np.broadcast_to(bias, (W, H, weights.shape[3])).copy()
    for u in range(3):
        for v in range(3):
            out += padded[u:u + W, v:v + H] @ weights[u, v]
    return out


def conv2d_3x3_backward(x, weights, upstream):
    W, H, Din = x.shape
    padded = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    d_padded = np.zeros_like(padded)
    d_w = np.zeros_like(weights)
    g2 = upstream.reshape(-1, upstream.shape[2])
    for u in range(3):
        for v in range(3):
            window = padded[u:u + W, v:v + H]
            d_padded[u:u + W, v:v + H] += upstream @ weights[u, v].T
            d_w[u, v] = window.reshape(-1, Din).T @ g2
    d_b = upstream.sum(axis=(0, 1))
    return d_padded[1:-1, 1:-1], d_w, d_b


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, upstream):
    return upstream * (x > 0)


def _pool_windows(x):
    W, H, D = x.shape
    W2, H2 = -(-W // 2), -(-H // 2)
    padded = np.full((2 * W2, 2 * H2, D), -np.inf, dtype=x.dtype)
    padded[:W, :H] = x
    # (W2, H2, D, 4): the four taps of each window on the last axis
    return padded.reshape(W2, 2, H2, 2, D).transpose(0, 2, 4, 1, 3).reshape(W2, H2, D, 4)


def maxpool2(x):
    """2x2 max pooling, stride 2; odd trailing rows/columns pool over the partial window."""
    _require_rank("maxpool2", "input", x, 3)
    return _pool_windows(x).max(axis=-1)


def maxpool2_backward(x, upstream):
    W, H, D = x.shape
    windows = _pool_windows(x)
    W2, H2 = windows.shape[:2]
    onehot = np.zeros(windows.shape, dtype=upstream.dtype)
    np.put_along_axis(onehot, windows.argmax(axis=-1)[..., None], 1, axis=-1)
    grad = onehot * upstream[..., None]
    grad = grad.reshape(W2, H2, D, 2, 2).transpose(0, 3, 1, 4, 2).reshape(2 * W2, 2 * H2, D)
    return grad[:W, :H]


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p, upstream, axis=-1):
    return p * (upstream - (upstream * p).sum(axis=axis, keepdims=True))


def cross_entropy(logits, label):
    """``-log softmax(logits)[label]`` for one sample."""
    C = logits.shape[-1]
    if not 0 <= label < C:
        raise ValueError(f"label {label} out of range for {C} classes")
    z = logits - logits.max()
    return float(np.log(np.exp(z).sum()) - z[label])


def cross_entropy_backward(logits, label):
    g = softmax(logits)
    g[label] -= 1
    return g


def batch_cross_entropy(logits, labels):
    """Mean cross-entropy over a ``(S, C)`` batch."""
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(labels)
    return float(np.mean([cross_entropy(z, int(c)) for z, c in zip(logits, labels)]))


def l2_normalize(u, eps=1e-12):
    n = float(np.sqrt((u * u).sum()))
    if n < eps:
        return np.zeros_like(u)
    return u / n


def l2_normalize_backward(u, upstream, eps=1e-12):
    n = float(np.sqrt((u * u).sum()))
    if n < eps:
        return np.zeros_like(u)
    y = u / n
    return (upstream - y * (y * upstream).sum()) / n


# ---------------------------------------------------------------------------
# Layer objects
# ---------------------------------------------------------------------------


@dataclass
class LayerGradients:
    d_input: np.ndarray
    d_params: list = field(default_factory=list)


class Layer:
    """Caches its last input so ``backward`` can be called once per ``forward``."""

    params: list

    def __init__(self):
        self.params = []
        self._x = None

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        self._x = x
        return self._forward(x)

    def backward(self, upstream) -> LayerGradients:
        if self._x is None:
            raise UsageError(f"{type(self).__name__}.backward called before forward")
        return self._backward(self._x, upstream)


class Conv1x1(Layer):
    def __init__(self, weights, bias):
        super().__init__()
        self.params = [weights, bias]

    def _forward(self, x):
        return conv2d_1x1(x, *self.params)

    def _backward(self, x, upstream):
        d_x, d_w, d_b = conv2d_1x1_backward(x, self.params[0], upstream)
        return LayerGradients(d_x, [d_w, d_b])


class Conv3x3(Layer):
    def __init__(self, weights, bias):
        super().__init__()
        self.params = [weights, bias]

    def _forward(self, x):
        return conv2d_3x3(x, *self.params)

    def _backward(self, x, upstream):
        d_x, d_w, d_b = conv2d_3x3_backward(x, self.params[0], upstream)
        return LayerGradients(d_x, [d_w, d_b])


class ReLU(Layer):
    def _forward(self, x):
        return relu(x)

    def _backward(self, x, upstream):
        return LayerGradients(relu_backward(x, upstream))


class MaxPool2(Layer):
    def _forward(self, x):
        return maxpool2(x)

    def _backward(self, x, upstream):
        return LayerGradients(maxpool2_backward(x, upstream))


def backward(layer: Layer, upstream) -> LayerGradients:
    return layer.backward(upstream)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class ParamCheck:
    name: str
    n_probed: int
    max_rel_err: float
    worst_index: tuple
    analytic: float
    numeric: float


@dataclass
class GradcheckReport:
    checks: list
    tol_rel: float
    failure: str | None = None

    @property
    def max_rel_err(self):
        return max((c.max_rel_err for c in self.checks), default=0.0)

    @property
    def passed(self):
        return self.failure is None and self.max_rel_err < self.tol_rel

    def summary(self):
        lines = []
        for c in self.checks:
            flag = "ok  " if c.max_rel_err < self.tol_rel else "FAIL"
            lines.append(
                f"  {flag} {c.name:<18} probes={c.n_probed:<4d} max_rel_err={c.max_rel_err:.2e}"
                f" at {c.worst_index} (analytic={c.analytic:.6e}, numeric={c.numeric:.6e})"
            )
        if self.failure:
            lines.append(f"  FAIL {self.failure}")
        return "\n".join(lines)


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def gradcheck(
    f: Callable[[], tuple],
    params: Sequence[np.ndarray],
    step: float = 1e-5,
    tol_rel: float = 1e-6,
    names: Sequence[str] | None = None,
    max_probes: int = 200,
    seed: int = 0,
) -> GradcheckReport:
    """Compare analytic gradients against central differences.

    ``f()`` must return ``(loss, grads)`` with ``grads`` aligned to ``params``.
    Parameters are perturbed in place and restored. Tensors with more than
    ``max_probes`` elements are probed at a seeded random subset of that size.
    """
    names = list(names) if names is not None else [f"param{i}" for i in range(len(params))]
    for name, p in zip(names, params):
        if p.dtype != np.float64:
            raise UsageError(f"gradcheck needs float64 parameters; {name} is {p.dtype}")
    loss0, grads = f()
    grads = [np.array(g, dtype=np.float64, copy=True) for g in grads]
    rng = np.random.default_rng(seed)
    report = GradcheckReport([], tol_rel)
    if not np.isfinite(loss0):
        report.failure = "non-finite loss at the base point"
        return report
    for name, p, g in zip(names, params, grads):
        if g.shape != p.shape:
            raise ShapeError("gradcheck", f"gradient of {name}", p.shape, g.shape)
        if not np.all(np.isfinite(g)):
            bad = np.unravel_index(int(np.argmax(~np.isfinite(g))), g.shape)
            report.failure = f"non-finite analytic gradient for {name} at {bad}"
            return report
        if p.size > max_probes:
            idx = np.sort(rng.choice(p.size, size=max_probes, replace=False))
        else:
            idx = np.arange(p.size)
        flat = p.reshape(-1)
        if not np.shares_memory(flat, p):
            raise UsageError(f"gradcheck cannot perturb non-contiguous parameter {name}")
        worst = ParamCheck(name, len(idx), 0.0, (), 0.0, 0.0)
        for k in idx:
            orig = flat[k]
            flat[k] = orig + step
            fp = f()[0]
            flat[k] = orig - step
            fm = f()[0]
            flat[k] = orig
            loc = np.unravel_index(int(k), p.shape)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                report.failure = f"non-finite loss probing {name} at {tuple(int(i) for i in loc)}"
                report.checks.append(worst)
                return report
            numeric = (fp - fm) / (2 * step)
            analytic = float(g.reshape(-1)[k])
            err = relative_error(analytic, numeric)
            if err >= worst.max_rel_err:
                worst = ParamCheck(name, len(idx), err, tuple(int(i) for i in loc), analytic, numeric)
        report.checks.append(worst)
    return report
