"""Attention branch: class-agnostic x class-specific heatmaps and the pooled weight map."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ShapeError
from .numerics import (
    conv2d_1x1,
    conv2d_1x1_backward,
    cross_entropy,
    cross_entropy_backward,
)

WEIGHT_EPS = 1e-8


@dataclass
class AttentionParams:
    w_ca: np.ndarray  # (D, 1)
    b_ca: np.ndarray  # (1,)
    W_cs: np.ndarray  # (D, C)
    b_cs: np.ndarray  # (C,)

    def __post_init__(self):
        D = self.w_ca.shape[0]
        if self.w_ca.shape != (D, 1) or self.b_ca.shape != (1,):
            raise ShapeError("AttentionParams", "class-agnostic filter", (D, 1), self.w_ca.shape)
        if self.W_cs.ndim != 2 or self.W_cs.shape[0] != D:
            raise ShapeError("AttentionParams", "class-specific filter rows", D, self.W_cs.shape[0])
        if self.W_cs.shape[1] < 2:
            raise ValueError("attention needs at least 2 classes")
        if self.b_cs.shape != (self.C,):
            raise ShapeError("AttentionParams", "class-specific bias", (self.C,), self.b_cs.shape)

    @property
    def D(self):
        return self.w_ca.shape[0]

    @property
    def C(self):
        return self.W_cs.shape[1]

    @classmethod
    def init(cls, D, C, rng, dtype=np.float64, std=0.01):
        return cls(
            (rng.standard_normal((D, 1)) * std).astype(dtype),
            np.zeros(1, dtype),
            (rng.standard_normal((D, C)) * std).astype(dtype),
            np.zeros(C, dtype),
        )


@dataclass
class AttentionMaps:
    H_ca: np.ndarray  # (W, H)
    H_cs: np.ndarray  # (W, H, C)
    H: np.ndarray  # (W, H, C), H_cs * H_ca
    weights: np.ndarray | None = None  # (W*H,)


def attention_forward(X, p: AttentionParams) -> AttentionMaps:
    if X.ndim != 3:
        raise ShapeError("attention_forward", "feature map rank", 3, X.ndim)
    if X.shape[2] != p.D:
        raise ShapeError("attention_forward", "descriptor dim", p.D, X.shape[2])
    H_ca = conv2d_1x1(X, p.w_ca, p.b_ca)[..., 0]
    H_cs = conv2d_1x1(X, p.W_cs, p.b_cs)
    return AttentionMaps(H_ca, H_cs, H_cs * H_ca[..., None])


def attention_forward_backward(X, p: AttentionParams, maps: AttentionMaps, d_H):
    """Backprop an upstream gradient on the combined maps ``H``.

    Returns ``(d_X, {"w_ca", "b_ca", "W_cs", "b_cs"})``.
    """
    d_Hcs = d_H * maps.H_ca[..., None]
    d_Hca = (d_H * maps.H_cs).sum(axis=2, keepdims=True)
    dx1, dw_ca, db_ca = conv2d_1x1_backward(X, p.w_ca, d_Hca)
    dx2, dW_cs, db_cs = conv2d_1x1_backward(X, p.W_cs, d_Hcs)
    return dx1 + dx2, {"w_ca": dw_ca, "b_ca": db_ca, "W_cs": dW_cs, "b_cs": db_cs}


def attention_logits(maps: AttentionMaps):
    """Per-class score: spatial mean of each combined map."""
    return maps.H.mean(axis=(0, 1))


def attention_logits_backward(maps: AttentionMaps, d_logits):
    W, H, C = maps.H.shape
    return np.broadcast_to(d_logits / (W * H), (W, H, C)).copy()


def attention_loss(logits, label):
    """Cross-entropy of the attention-branch scores.

    A 2-D ``logits`` batch with a label vector gives the batch mean.
    """
    logits = np.asarray(logits)
    if logits.ndim == 1:
        return cross_entropy(logits, int(label))
    labels = np.asarray(label)
    return float(np.mean([cross_entropy(z, int(c)) for z, c in zip(logits, labels)]))


def attention_loss_backward(logits, label):
    return cross_entropy_backward(np.asarray(logits), int(label))


def attention_weights(maps: AttentionMaps):
    """Per-location weights from the class-wise max of the combined maps.

    Maxima are clamped at zero before normalizing; if nothing positive
    remains the weights fall back to uniform.
    """
    m = maps.H.max(axis=2).reshape(-1)
    r = np.maximum(m, 0)
    total = r.sum()
    if total > WEIGHT_EPS:
        return r / total
    return np.full_like(m, 1.0 / m.size)


def attention_weights_backward(maps: AttentionMaps, d_w):
    """Subgradient through the argmax class and the clamp; zero on the uniform branch."""
    W, H, C = maps.H.shape
    Hf = maps.H.reshape(-1, C)
    arg = Hf.argmax(axis=1)
    m = Hf[np.arange(Hf.shape[0]), arg]
    r = np.maximum(m, 0)
    total = r.sum()
    d_H = np.zeros_like(Hf)
    if total > WEIGHT_EPS:
        w = r / total
        d_r = (d_w - (w * d_w).sum()) / total
        d_m = d_r * (m > 0)
        d_H[np.arange(Hf.shape[0]), arg] = d_m
    return d_H.reshape(W, H, C)


def max_map(maps: AttentionMaps):
    return maps.H.max(axis=2)


# ---------------------------------------------------------------------------
# Heatmap export
# ---------------------------------------------------------------------------


def to_gray8(map2d):
    """Min-max scale to 0..255; a constant map becomes all zeros."""
    lo, hi = float(map2d.min()), float(map2d.max())
    if hi - lo <= 0:
        return np.zeros(map2d.shape, np.uint8)
    return np.rint((map2d - lo) / (hi - lo) * 255).astype(np.uint8)


def write_pgm(path, map2d):
    """Binary PGM (P5). The first array axis is the image width."""
    img = to_gray8(np.asarray(map2d, dtype=np.float64)).T
    rows, cols = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pgm(path):
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit P5 PGM")
    cols, rows = int(tokens[1]), int(tokens[2])
    pixels = np.frombuffer(data[pos + 1:], np.uint8)
    if pixels.size != rows * cols:
        raise ValueError(f"{path}: expected {rows * cols} pixels, found {pixels.size}")
    return pixels.reshape(rows, cols).T


def export_heatmaps(out_dir, sample_id, maps: AttentionMaps, per_class=False, class_names=None):
    """Write ``<id>_att.pgm`` (class-max map) or one ``<id>_att_<class>.pgm`` per class."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if per_class:
        for c in range(maps.H.shape[2]):
            name = class_names[c] if class_names else str(c)
            path = out_dir / f"{sample_id}_att_{name}.pgm"
            write_pgm(path, maps.H[..., c])
            written.append(path)
    else:
        path = out_dir / f"{sample_id}_att.pgm"
        write_pgm(path, max_map(maps))
        written.append(path)
    return written
