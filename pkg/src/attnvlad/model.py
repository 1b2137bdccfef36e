"""Two-branch network: toy backbone, attention head, pooled classifier, and training.

Parameters live in a flat ``name -> ndarray`` dict on :class:`ModelState`::

    conv1.w conv1.b conv2.w conv2.b     backbone (image inputs only)
    att.w_ca att.b_ca att.W_cs att.b_cs attention filters
    cb.centers cb.s cb.h                codebook (vlad / bow pooling)
    cls.W cls.b                         classifier on the pooled vector
"""
from __future__ import annotations

import ast
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .aggregation import (
    PooledVector,
    bow_aggregate,
    bow_aggregate_backward,
    gap_aggregate,
    gap_aggregate_backward,
    normalize_vlad,
    normalize_vlad_backward,
    soft_assign,
    soft_assign_backward,
    vlad_residuals,
    vlad_residuals_backward,
)
from .attention import (
    AttentionMaps,
    AttentionParams,
    attention_forward,
    attention_forward_backward,
    attention_logits,
    attention_logits_backward,
    attention_weights,
    attention_weights_backward,
)
from .codebook import Codebook, init_decoupled, kmeans_fit
from .errors import FormatError, ShapeError, TrainingError
from .numerics import (
    conv2d_3x3,
    conv2d_3x3_backward,
    cross_entropy,
    cross_entropy_backward,
    maxpool2,
    maxpool2_backward,
    relu,
    relu_backward,
    softmax,
)
from .seeding import substream, substream_seed

log = logging.getLogger(__name__)

POOLINGS = ("vlad", "bow", "gap")
METRICS_HEADER = "epoch,stage,split,loss_cls,loss_att,loss_total,acc"


@dataclass
class TrainConfig:
    lam: float = 0.4
    alpha: float = 100.0
    K: int | None = None  # None: 64 for vlad, 4096 for bow
    pooling: str = "vlad"
    attention: bool = True
    assign_mode: str = "decoupled"
    batch_size: int = 16
    weight_decay: float = 5e-4
    adam_eps: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    stage1_lr: float = 1e-4
    stage1_epochs: int = 20
    stage2_cls_lr: float = 1e-2
    stage2_shared_lr: float = 1e-4
    stage2_epochs: int = 50
    lr_decay: float = 0.1
    lr_decay_every: int = 15
    feature_dim: int = 32
    hidden_channels: int = 16
    kmeans_max_descriptors: int = 100_000
    kmeans_iters: int = 100
    init_std: float = 0.01
    flip_avg: bool = True
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.assign_mode not in ("direct", "decoupled"):
            raise ValueError(f"assign_mode must be direct or decoupled, got {self.assign_mode!r}")
        if min(self.stage1_lr, self.stage2_cls_lr, self.stage2_shared_lr) <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def codewords(self):
        if self.K is not None:
            return self.K
        return 4096 if self.pooling == "bow" else 64


@dataclass
class ModelState:
    cfg: TrainConfig
    num_classes: int
    in_channels: int
    input_mode: str  # "image" runs the backbone, "features" takes X directly
    params: dict
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def create(cls, cfg: TrainConfig, num_classes, in_channels, input_mode="features", rng=None):
        if input_mode not in ("image", "features"):
            raise ValueError(f"input_mode must be image or features, got {input_mode!r}")
        rng = rng if rng is not None else substream(cfg.seed, "init")
        dt = np.dtype(cfg.dtype)
        std = cfg.init_std
        p = {}
        if input_mode == "image":
            hid, D = cfg.hidden_channels, cfg.feature_dim
            p["conv1.w"] = rng.standard_normal((3, 3, in_channels, hid)) * math.sqrt(2 / (9 * in_channels))
            p["conv1.b"] = np.zeros(hid)
            p["conv2.w"] = rng.standard_normal((3, 3, hid, D)) * math.sqrt(2 / (9 * hid))
            p["conv2.b"] = np.zeros(D)
        else:
            D = in_channels
        att = AttentionParams.init(D, num_classes, rng, std=std)
        p.update({"att.w_ca": att.w_ca, "att.b_ca": att.b_ca, "att.W_cs": att.W_cs, "att.b_cs": att.b_cs})
        K = cfg.codewords
        if cfg.pooling in ("vlad", "bow"):
            p["cb.centers"] = np.zeros((K, D))
            p["cb.s"] = np.zeros((K, D))
            p["cb.h"] = np.zeros(K)
        pooled = {"vlad": K * D, "bow": K, "gap": D}[cfg.pooling]
        p["cls.W"] = rng.standard_normal((pooled, num_classes)) * std
        p["cls.b"] = np.zeros(num_classes)
        p = {k: np.ascontiguousarray(a, dtype=dt) for k, a in p.items()}
        state = cls(cfg, num_classes, in_channels, input_mode, p)
        state.reset_optimizer()
        return state

    @property
    def feature_dim(self):
        return self.params["att.w_ca"].shape[0]

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    def reset_optimizer(self):
        self.m = {k: np.zeros_like(a) for k, a in self.params.items()}
        self.v = {k: np.zeros_like(a) for k, a in self.params.items()}
        self.step = 0

    def attention_params(self):
        p = self.params
        return AttentionParams(p["att.w_ca"], p["att.b_ca"], p["att.W_cs"], p["att.b_cs"])

    def codebook(self):
        p = self.params
        return Codebook(p["cb.centers"], p["cb.s"], p["cb.h"], self.cfg.alpha)

    def set_codebook(self, cb: Codebook):
        for name, arr in (("cb.centers", cb.centers), ("cb.s", cb.s), ("cb.h", cb.h)):
            self.params[name][...] = arr


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


@dataclass
class JointOutput:
    cls_logits: np.ndarray | None
    att_logits: np.ndarray
    maps: AttentionMaps
    pooled: PooledVector | None
    X: np.ndarray
    cache: dict


def backbone_forward(state: ModelState, image):
    p = state.params
    z1 = conv2d_3x3(image, p["conv1.w"], p["conv1.b"])
    a1 = relu(z1)
    p1 = maxpool2(a1)
    z2 = conv2d_3x3(p1, p["conv2.w"], p["conv2.b"])
    # pooling commutes with the following ReLU, so this is still pre-activation
    X = maxpool2(z2)
    return X, {"image": image, "z1": z1, "a1": a1, "p1": p1, "z2": z2}


def backbone_backward(state: ModelState, cache, d_X):
    p = state.params
    d_z2 = maxpool2_backward(cache["z2"], d_X)
    d_p1, dw2, db2 = conv2d_3x3_backward(cache["p1"], p["conv2.w"], d_z2)
    d_a1 = maxpool2_backward(cache["a1"], d_p1)
    d_z1 = relu_backward(cache["z1"], d_a1)
    _, dw1, db1 = conv2d_3x3_backward(cache["image"], p["conv1.w"], d_z1)
    return {"conv1.w": dw1, "conv1.b": db1, "conv2.w": dw2, "conv2.b": db2}


def extract_features(state: ModelState, x):
    x = np.asarray(x, dtype=state.dtype)
    if state.input_mode == "image":
        if x.ndim != 3 or x.shape[2] != state.in_channels:
            raise ShapeError("forward_joint", "image channels", state.in_channels, x.shape[-1])
        return backbone_forward(state, x)
    if x.ndim != 3 or x.shape[2] != state.feature_dim:
        raise ShapeError("forward_joint", "feature channels", state.feature_dim, x.shape[-1])
    return x, None


def forward_joint(state: ModelState, x, stage=2, uniform_weights=False) -> JointOutput:
    """Run the shared base, the attention head and (stage 2) the pooled classifier.

    ``x`` is an image when the state was built in image mode, otherwise a
    precomputed ``(W, H, D)`` feature map. ``uniform_weights`` replaces the
    attention weight map by ``1/N`` everywhere (attention must be enabled).
    """
    cfg = state.cfg
    X, bb_cache = extract_features(state, x)
    maps = attention_forward(X, state.attention_params())
    att_logits = attention_logits(maps)
    cache = {"bb": bb_cache}
    if stage == 1:
        return JointOutput(None, att_logits, maps, None, X, cache)
    N = X.shape[0] * X.shape[1]
    w = None
    if cfg.attention:
        if uniform_weights:
            w = np.full(N, 1.0 / N, dtype=X.dtype)
        else:
            w = attention_weights(maps)
        maps.weights = w
    cache["uniform"] = uniform_weights
    x2 = X.reshape(N, -1)
    if cfg.pooling == "gap":
        pooled = gap_aggregate(x2, w, validate=False)
    else:
        cb = state.codebook()
        a = soft_assign(x2, cb, cfg.assign_mode)
        cache["a"] = a
        if cfg.pooling == "vlad":
            raw = vlad_residuals(x2, a, cb.centers, w, validate=False)
            cache["raw"] = raw
            pooled = normalize_vlad(raw)
        else:
            pooled = bow_aggregate(a, w, validate=False)
    cls_logits = pooled.v @ state.params["cls.W"] + state.params["cls.b"]
    return JointOutput(cls_logits, att_logits, maps, pooled, X, cache)


def joint_loss(cls_logits, att_logits, label, lam):
    """``CE(cls) + lam * CE(att)``, averaged over the batch for 2-D inputs.

    Returns ``(total, loss_cls, loss_att)``.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    cls_logits, att_logits = np.atleast_2d(cls_logits), np.atleast_2d(att_logits)
    labels = np.atleast_1d(label)
    l_cls = float(np.mean([cross_entropy(z, int(c)) for z, c in zip(cls_logits, labels)]))
    l_att = float(np.mean([cross_entropy(z, int(c)) for z, c in zip(att_logits, labels)]))
    return l_cls + lam * l_att, l_cls, l_att


def backward_joint(state: ModelState, out: JointOutput, label, lam, stage=2):
    """Gradients of ``L_cls + lam * L_att`` (stage 2) or ``L_att`` (stage 1).

    Returns ``(losses, grads)`` with ``losses = (total, loss_cls, loss_att)``.
    """
    cfg = state.cfg
    p = state.params
    X = out.X
    Wd, Hd, D = X.shape
    N = Wd * Hd
    grads = {}
    l_att = cross_entropy(out.att_logits, label)
    att_scale = 1.0 if stage == 1 else lam
    d_H = attention_logits_backward(out.maps, att_scale * cross_entropy_backward(out.att_logits, label))
    d_X = np.zeros_like(X)
    l_cls = 0.0
    if stage == 2:
        l_cls = cross_entropy(out.cls_logits, label)
        d_logits = cross_entropy_backward(out.cls_logits, label)
        v = out.pooled.v
        grads["cls.W"] = np.outer(v, d_logits)
        grads["cls.b"] = d_logits
        d_v = p["cls.W"] @ d_logits
        w = out.maps.weights if cfg.attention else None
        x2 = X.reshape(N, D)
        d_w = None
        if cfg.pooling == "gap":
            d_x2, d_w = gap_aggregate_backward(x2, w, d_v)
        else:
            cb = state.codebook()
            a = out.cache["a"]
            if cfg.pooling == "vlad":
                d_raw = normalize_vlad_backward(out.cache["raw"], d_v)
                d_x2, d_a, d_centers, d_w = vlad_residuals_backward(x2, a, cb.centers, w, d_raw)
            else:
                d_a, d_w = bow_aggregate_backward(a, w, d_v)
                d_x2 = np.zeros_like(x2)
                d_centers = np.zeros_like(cb.centers)
            d_xa, cb_grads = soft_assign_backward(x2, cb, a, d_a, cfg.assign_mode)
            d_x2 = d_x2 + d_xa
            grads["cb.centers"] = d_centers + cb_grads.get("centers", 0)
            grads["cb.s"] = cb_grads.get("s", np.zeros_like(cb.s))
            grads["cb.h"] = cb_grads.get("h", np.zeros_like(cb.h))
        d_X += d_x2.reshape(X.shape)
        if d_w is not None and not out.cache.get("uniform"):
            d_H = d_H + attention_weights_backward(out.maps, d_w)
    d_Xa, att_grads = attention_forward_backward(X, state.attention_params(), out.maps, d_H)
    d_X += d_Xa
    for k, g in att_grads.items():
        grads["att." + k] = g
    if state.input_mode == "image":
        grads.update(backbone_backward(state, out.cache["bb"], d_X))
    total = l_att if stage == 1 else l_cls + lam * l_att
    return (total, l_cls, l_att), grads


def loss_and_grads(state: ModelState, x, label, stage=2, lam=None, uniform_weights=False):
    lam = state.cfg.lam if lam is None else lam
    out = forward_joint(state, x, stage=stage, uniform_weights=uniform_weights)
    losses, grads = backward_joint(state, out, label, lam, stage=stage)
    return out, losses, grads


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


def decays(name):
    """Weight decay applies to weight tensors and the codebook's s / centers only."""
    return name.endswith(".w") or name in ("att.w_ca", "att.W_cs", "cls.W", "cb.s", "cb.centers")


def adam_step(state: ModelState, grads: dict, lr, weight_decay=0.0, eps=1e-4, beta1=0.9, beta2=0.999):
    """One bias-corrected Adam update with decoupled weight decay, in place.

    ``lr`` is either a float or a ``name -> lr`` mapping; parameters missing
    from ``grads`` are left untouched.
    """
    state.step += 1
    t = state.step
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    for name, g in grads.items():
        theta = state.params[name]
        if g.shape != theta.shape:
            raise ShapeError("adam_step", f"gradient of {name}", theta.shape, g.shape)
        rate = lr[name] if isinstance(lr, dict) else lr
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        if weight_decay and decays(name):
            theta -= (rate * weight_decay) * theta
        theta -= rate * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ---------------------------------------------------------------------------
# Training and evaluation
# ---------------------------------------------------------------------------


@dataclass
class MetricsRecord:
    epoch: int
    stage: int
    split: str
    loss_cls: float
    loss_att: float
    loss_total: float
    acc: float

    def line(self):
        return (f"{self.epoch},{self.stage},{self.split},{self.loss_cls:.6f},"
                f"{self.loss_att:.6f},{self.loss_total:.6f},{self.acc:.6f}")


def format_metrics(records):
    return "\n".join([METRICS_HEADER] + [r.line() for r in records]) + "\n"


def stage_lrs(state: ModelState, stage, epoch):
    cfg = state.cfg
    if stage == 1:
        return {k: cfg.stage1_lr for k in state.params}
    decay = cfg.lr_decay ** (epoch // cfg.lr_decay_every) if cfg.lr_decay_every > 0 else 1.0
    return {k: (cfg.stage2_cls_lr if k.startswith("cls.") else cfg.stage2_shared_lr) * decay
            for k in state.params}


def _check_finite(loss, where):
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss ({loss}) {where}")


def run_epoch(state: ModelState, samples, stage, epoch, rng, uniform_weights=False):
    cfg = state.cfg
    order = rng.permutation(len(samples))
    lrs = stage_lrs(state, stage, epoch)
    sums = np.zeros(3)
    correct = 0
    for start in range(0, len(order), cfg.batch_size):
        batch = order[start:start + cfg.batch_size]
        acc_grads = None
        for i in batch:
            s = samples[i]
            out, losses, grads = loss_and_grads(state, s.x, s.label, stage, uniform_weights=uniform_weights)
            _check_finite(losses[0], f"at stage {stage} epoch {epoch} sample {s.sample_id}")
            sums += losses
            logits = out.att_logits if stage == 1 else out.cls_logits
            correct += int(np.argmax(logits) == s.label)
            if acc_grads is None:
                acc_grads = grads
            else:
                for k, g in grads.items():
                    acc_grads[k] = acc_grads[k] + g
        scale = 1.0 / len(batch)
        adam_step(state, {k: g * scale for k, g in acc_grads.items()}, lrs,
                  cfg.weight_decay, cfg.adam_eps, cfg.beta1, cfg.beta2)
    n = len(samples)
    total, l_cls, l_att = sums / n
    return MetricsRecord(epoch, stage, "train", l_cls, l_att, total, correct / n)


def split_losses(state: ModelState, samples, stage, uniform_weights=False):
    sums = np.zeros(3)
    correct = 0
    for s in samples:
        out = forward_joint(state, s.x, stage=stage, uniform_weights=uniform_weights)
        l_att = cross_entropy(out.att_logits, s.label)
        if stage == 1:
            sums += (l_att, 0.0, l_att)
            correct += int(np.argmax(out.att_logits) == s.label)
        else:
            total, l_cls, _ = joint_loss(out.cls_logits, out.att_logits, s.label, state.cfg.lam)
            sums += (total, l_cls, l_att)
            correct += int(np.argmax(out.cls_logits) == s.label)
    n = max(len(samples), 1)
    return sums / n, correct / n


def init_codebook_from_features(state: ModelState, samples):
    cfg = state.cfg
    feats = np.concatenate([extract_features(state, s.x)[0].reshape(-1, state.feature_dim) for s in samples])
    rng = substream(cfg.seed, "kmeans")
    if feats.shape[0] > cfg.kmeans_max_descriptors:
        keep = np.sort(rng.choice(feats.shape[0], cfg.kmeans_max_descriptors, replace=False))
        feats = feats[keep]
    K = cfg.codewords
    if feats.shape[0] < K:
        raise TrainingError(f"only {feats.shape[0]} descriptors available for K={K} codewords")
    centers = kmeans_fit(feats.astype(np.float64), K, seed=substream_seed(cfg.seed, "kmeans"),
                         max_iters=cfg.kmeans_iters)
    cb = init_decoupled(centers, cfg.alpha)
    state.set_codebook(cb)
    return cb


def train(dataset, cfg: TrainConfig, input_mode=None, uniform_weights=False, eval_test=True, on_record=None):
    """Stage 1 trains base + attention on the attention loss alone; stage 2
    initializes the codebook by k-means over stage-1 features and trains
    everything on the joint loss with per-group learning rates.

    ``dataset`` needs ``train``/``test`` sample lists and ``num_classes``.
    Returns ``(state, records)``.
    """
    if not dataset.train:
        raise TrainingError("training split is empty")
    x0 = dataset.train[0].x
    if input_mode is None:
        input_mode = "image" if getattr(dataset, "variant", "features") == "image" else "features"
    state = ModelState.create(cfg, dataset.num_classes, x0.shape[2], input_mode)
    shuffle = substream(cfg.seed, "shuffle")
    records = []

    def emit(rec):
        records.append(rec)
        log.info(rec.line())
        if on_record is not None:
            on_record(rec)

    for epoch in range(cfg.stage1_epochs):
        emit(run_epoch(state, dataset.train, 1, epoch, shuffle))
        if eval_test and dataset.test:
            (total, l_cls, l_att), acc = split_losses(state, dataset.test, 1)
            emit(MetricsRecord(epoch, 1, "test", l_cls, l_att, total, acc))

    if cfg.pooling in ("vlad", "bow"):
        init_codebook_from_features(state, dataset.train)
    state.reset_optimizer()
    for epoch in range(cfg.stage2_epochs):
        emit(run_epoch(state, dataset.train, 2, epoch, shuffle, uniform_weights))
        if eval_test and dataset.test:
            (total, l_cls, l_att), acc = split_losses(state, dataset.test, 2, uniform_weights)
            emit(MetricsRecord(epoch, 2, "test", l_cls, l_att, total, acc))
    return state, records


@dataclass
class EvalResult:
    accuracy: float
    per_class_accuracy: np.ndarray
    confusion: np.ndarray
    loss_cls: float = 0.0
    loss_att: float = 0.0
    loss_total: float = 0.0

    @property
    def mean_class_accuracy(self):
        return float(np.mean(self.per_class_accuracy))


def predict_proba(state: ModelState, x, flip_avg=False):
    out = forward_joint(state, x)
    probs = softmax(out.cls_logits)
    if flip_avg:
        flipped = forward_joint(state, np.ascontiguousarray(np.asarray(x)[::-1]))
        probs = 0.5 * (probs + softmax(flipped.cls_logits))
    return probs, out


def evaluate(state: ModelState, samples, flip_avg=None) -> EvalResult:
    """Accuracy of the pooled branch, optionally averaging over a width flip."""
    flip_avg = state.cfg.flip_avg if flip_avg is None else flip_avg
    C = state.num_classes
    confusion = np.zeros((C, C), dtype=np.int64)
    sums = np.zeros(3)
    for s in samples:
        probs, out = predict_proba(state, s.x, flip_avg)
        confusion[s.label, int(np.argmax(probs))] += 1
        total, l_cls, l_att = joint_loss(out.cls_logits, out.att_logits, s.label, state.cfg.lam)
        sums += (total, l_cls, l_att)
    counts = confusion.sum(axis=1)
    per_class = np.divide(np.diag(confusion), counts, out=np.zeros(C), where=counts > 0)
    n = max(len(samples), 1)
    acc = float(np.trace(confusion)) / n
    return EvalResult(acc, per_class, confusion, sums[1] / n, sums[2] / n, sums[0] / n)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"AAGG"
CKPT_VERSION = 1


def _cfg_text(state: ModelState):
    lines = [f"{k} = {v!r}" for k, v in asdict(state.cfg).items()]
    lines += [f"num_classes = {state.num_classes}", f"in_channels = {state.in_channels}",
              f"input_mode = {state.input_mode!r}", f"step = {state.step}"]
    return "\n".join(lines) + "\n"


def checkpoint_bytes(state: ModelState) -> bytes:
    """Serialize: magic, u32 version, u32-length config text, u32 tensor count,
    then per tensor u32 name length, name, u32 rank, u64 dims, f32 LE payload."""
    meta = _cfg_text(state).encode("utf-8")
    tensors = []
    for name in sorted(state.params):
        tensors.append((name, state.params[name]))
        tensors.append(("adam.m." + name, state.m[name]))
        tensors.append(("adam.v." + name, state.v[name]))
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(meta)), meta,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(state: ModelState, path):
    Path(path).write_bytes(checkpoint_bytes(state))


class _Reader:
    def __init__(self, data, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError("truncated", self.path, f"file ends while reading {what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def _parse_cfg_text(text):
    values = {}
    for line in text.splitlines():
        k, _, v = line.partition(" = ")
        values[k] = ast.literal_eval(v)
    return values


def load_checkpoint(path) -> ModelState:
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    magic = r.take(4, "magic")
    if magic != CKPT_MAGIC:
        raise FormatError("bad_magic", path, f"expected {CKPT_MAGIC!r}, got {magic!r}")
    version = r.u32("version")
    if version != CKPT_VERSION:
        raise FormatError("bad_version", path, f"unsupported version {version}")
    meta = _parse_cfg_text(r.take(r.u32("config length"), "config").decode("utf-8"))
    n = r.u32("tensor count")
    tensors = {}
    for _ in range(n):
        name = r.take(r.u32("name length"), "tensor name").decode("utf-8")
        rank = r.u32(f"rank of {name}")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, f"dims of {name}"))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(4 * count, f"payload of {name}"), dtype="<f4").reshape(dims)
        tensors[name] = arr
    if r.pos != len(data):
        raise FormatError("trailing_bytes", path, f"{len(data) - r.pos} unread bytes")
    cfg_keys = {f.name for f in fields(TrainConfig)}
    cfg = TrainConfig(**{k: v for k, v in meta.items() if k in cfg_keys})
    dt = np.dtype(cfg.dtype)
    params, m, v = {}, {}, {}
    for name, arr in tensors.items():
        target = m if name.startswith("adam.m.") else v if name.startswith("adam.v.") else params
        key = name.removeprefix("adam.m.").removeprefix("adam.v.")
        target[key] = arr.astype(dt)
    if set(params) != set(m) or set(params) != set(v):
        raise FormatError("size_mismatch", path, "optimizer moments do not mirror parameters")
    return ModelState(cfg, meta["num_classes"], meta["in_channels"], meta["input_mode"],
                      params, m, v, meta["step"])


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)
