"""Finite-difference checks for every differentiable piece, grouped by module.

Each case builds a float64 scalar objective ``sum(R * op(...))`` (``R`` a fixed
random projection) or an actual loss, and hands it to :func:`gradcheck`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import aggregation as agg
from . import attention as att
from . import numerics as nx
from .codebook import Codebook
from .model import ModelState, TrainConfig, loss_and_grads

MODULES = ("numerics", "aggregation", "attention", "model")


@dataclass
class CaseResult:
    module: str
    name: str
    report: nx.GradcheckReport


def _rng(seed):
    return np.random.default_rng(seed)


def _projected(fn, backward, inputs, rng):
    """Objective ``sum(R * fn(*inputs))`` with gradients from ``backward(R, *inputs)``."""
    R = rng.standard_normal(np.shape(fn(*inputs)))

    def f():
        return float((R * fn(*inputs)).sum()), backward(R, *inputs)

    return f


# ---------------------------------------------------------------------------
# numerics
# ---------------------------------------------------------------------------


def _dims(r, lo, hi, n):
    return tuple(int(d) for d in r.integers(lo, hi + 1, size=n))


def case_conv1x1(seed):
    r = _rng(seed)
    W, H, Din, Dout = _dims(r, 1, 5, 4)
    x, w, b = r.standard_normal((W, H, Din)), r.standard_normal((Din, Dout)), r.standard_normal(Dout)
    f = _projected(nx.conv2d_1x1, lambda R, x, w, b: list(nx.conv2d_1x1_backward(x, w, R)), (x, w, b), r)
    return f, [x, w, b], ["x", "weights", "bias"]


def case_conv3x3(seed):
    r = _rng(seed)
    W, H, Din, Dout = _dims(r, 1, 5, 4)
    x, w, b = r.standard_normal((W, H, Din)), r.standard_normal((3, 3, Din, Dout)), r.standard_normal(Dout)
    f = _projected(nx.conv2d_3x3, lambda R, x, w, b: list(nx.conv2d_3x3_backward(x, w, R)), (x, w, b), r)
    return f, [x, w, b], ["x", "weights", "bias"]


def case_relu(seed):
    r = _rng(seed)
    x = r.standard_normal(_dims(r, 1, 5, 3))
    x += np.sign(x) * 0.01  # keep away from the kink
    f = _projected(nx.relu, lambda R, x: [nx.relu_backward(x, R)], (x,), r)
    return f, [x], ["x"]


def case_maxpool(seed):
    r = _rng(seed)
    # odd extents exercise the partial windows; a permutation keeps maxima well separated
    shape = _dims(r, 1, 6, 3)
    x = r.permutation(int(np.prod(shape))).reshape(shape) * 0.1
    f = _projected(nx.maxpool2, lambda R, x: [nx.maxpool2_backward(x, R)], (x,), r)
    return f, [x], ["x"]


def case_cross_entropy(seed):
    r = _rng(seed)
    C = int(r.integers(2, 7))
    z, label = r.standard_normal(C), int(r.integers(C))

    def f():
        return nx.cross_entropy(z, label), [nx.cross_entropy_backward(z, label)]

    return f, [z], ["logits"]


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def _codebook(r, K, D, alpha=1.0):
    return Codebook(r.standard_normal((K, D)), r.standard_normal((K, D)), r.standard_normal(K), alpha)


def _weights(r, N):
    w = r.uniform(0.2, 1.0, N)
    return w / w.sum()


def case_soft_assign_direct(seed):
    r = _rng(seed)
    N, K, D = _dims(r, 1, 6, 3)
    x, cb = r.standard_normal((N, D)), _codebook(r, K, D, alpha=0.7 / D)
    fn = lambda x, c: agg.soft_assign(x, Codebook(c, cb.s, cb.h, cb.alpha), "direct")

    def bw(R, x, c):
        cb2 = Codebook(c, cb.s, cb.h, cb.alpha)
        dx, g = agg.soft_assign_backward(x, cb2, fn(x, c), R, "direct")
        return [dx, g["centers"]]

    return _projected(fn, bw, (x, cb.centers), r), [x, cb.centers], ["x", "centers"]


def case_soft_assign_decoupled(seed):
    r = _rng(seed)
    N, K, D = _dims(r, 1, 6, 3)
    x, cb = r.standard_normal((N, D)), _codebook(r, K, D)
    cb.s /= np.sqrt(D)
    fn = lambda x, s, h: agg.soft_assign(x, Codebook(cb.centers, s, h, 1.0), "decoupled")

    def bw(R, x, s, h):
        cb2 = Codebook(cb.centers, s, h, 1.0)
        dx, g = agg.soft_assign_backward(x, cb2, fn(x, s, h), R, "decoupled")
        return [dx, g["s"], g["h"]]

    return _projected(fn, bw, (x, cb.s, cb.h), r), [x, cb.s, cb.h], ["x", "s", "h"]


def _vlad_inputs(r):
    N, K, D = _dims(r, 1, 6, 3)
    return r.standard_normal((N, D)), nx.softmax(r.standard_normal((N, K))), r.standard_normal((K, D))


def case_vlad_unweighted(seed):
    r = _rng(seed)
    x, a, c = _vlad_inputs(r)
    fn = lambda x, a, c: agg.vlad_residuals(x, a, c)
    bw = lambda R, x, a, c: list(agg.vlad_residuals_backward(x, a, c, None, R)[:3])
    return _projected(fn, bw, (x, a, c), r), [x, a, c], ["x", "assign", "centers"]


def case_vlad_weighted(seed):
    r = _rng(seed)
    x, a, c = _vlad_inputs(r)
    w = _weights(r, x.shape[0])
    fn = lambda x, a, c, w: agg.vlad_residuals(x, a, c, w, validate=False)
    bw = lambda R, x, a, c, w: list(agg.vlad_residuals_backward(x, a, c, w, R))
    return _projected(fn, bw, (x, a, c, w), r), [x, a, c, w], ["x", "assign", "centers", "weights"]


def case_normalize_vlad(seed):
    r = _rng(seed)
    raw = r.standard_normal(_dims(r, 1, 5, 2))
    fn = lambda raw: agg.normalize_vlad(raw).v
    bw = lambda R, raw: [agg.normalize_vlad_backward(raw, R)]
    return _projected(fn, bw, (raw,), r), [raw], ["raw"]


def case_bow_unweighted(seed):
    r = _rng(seed)
    a = nx.softmax(r.standard_normal(_dims(r, 1, 6, 2)))
    fn = lambda a: agg.bow_aggregate(a).v
    bw = lambda R, a: [agg.bow_aggregate_backward(a, None, R)[0]]
    return _projected(fn, bw, (a,), r), [a], ["assign"]


def case_bow_weighted(seed):
    r = _rng(seed)
    # N >= 2: with one location the weight cancels in the normalization
    N, K = _dims(r, 2, 6, 2)
    a, w = nx.softmax(r.standard_normal((N, K))), _weights(r, N)
    fn = lambda a, w: agg.bow_aggregate(a, w, validate=False).v
    bw = lambda R, a, w: list(agg.bow_aggregate_backward(a, w, R))
    return _projected(fn, bw, (a, w), r), [a, w], ["assign", "weights"]


def case_gap_unweighted(seed):
    r = _rng(seed)
    x = r.standard_normal(_dims(r, 1, 6, 2))
    fn = lambda x: agg.gap_aggregate(x).v
    bw = lambda R, x: [agg.gap_aggregate_backward(x, None, R)[0]]
    return _projected(fn, bw, (x,), r), [x], ["x"]


def case_gap_weighted(seed):
    r = _rng(seed)
    N, D = _dims(r, 1, 6, 2)
    x, w = r.standard_normal((N, D)), _weights(r, N)
    fn = lambda x, w: agg.gap_aggregate(x, w, validate=False).v
    bw = lambda R, x, w: list(agg.gap_aggregate_backward(x, w, R))
    return _projected(fn, bw, (x, w), r), [x, w], ["x", "weights"]


def case_attentional_vlad_chain(seed):
    """Decoupled assignment -> weighted residuals -> two-stage normalization."""
    r = _rng(seed)
    x, cb, w = r.standard_normal((6, 3)), _codebook(r, 3, 3), _weights(r, 6)
    s, h, c = cb.s, cb.h, cb.centers

    def fn(x, s, h, c, w):
        cb2 = Codebook(c, s, h, 1.0)
        a = agg.soft_assign(x, cb2)
        return agg.normalize_vlad(agg.vlad_residuals(x, a, c, w, validate=False)).v

    def bw(R, x, s, h, c, w):
        cb2 = Codebook(c, s, h, 1.0)
        a = agg.soft_assign(x, cb2)
        raw = agg.vlad_residuals(x, a, c, w, validate=False)
        d_raw = agg.normalize_vlad_backward(raw, R)
        dx, da, dc, dw = agg.vlad_residuals_backward(x, a, c, w, d_raw)
        dx2, g = agg.soft_assign_backward(x, cb2, a, da)
        return [dx + dx2, g["s"], g["h"], dc, dw]

    params = [x, s, h, c, w]
    return _projected(fn, bw, tuple(params), r), params, ["x", "s", "h", "centers", "weights"]


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def case_attention_loss(seed):
    """Heatmaps -> per-class spatial mean -> cross-entropy, on a 4x4x3 input with C=3."""
    r = _rng(seed)
    X = r.standard_normal((4, 4, 3))
    # moderate scales keep the softmax away from saturation
    p = att.AttentionParams(0.5 * r.standard_normal((3, 1)), 0.5 * r.standard_normal(1),
                            0.5 * r.standard_normal((3, 3)), 0.5 * r.standard_normal(3))
    label = 1

    def f():
        maps = att.attention_forward(X, p)
        logits = att.attention_logits(maps)
        d_H = att.attention_logits_backward(maps, att.attention_loss_backward(logits, label))
        dX, g = att.attention_forward_backward(X, p, maps, d_H)
        return att.attention_loss(logits, label), [dX, g["w_ca"], g["b_ca"], g["W_cs"], g["b_cs"]]

    return f, [X, p.w_ca, p.b_ca, p.W_cs, p.b_cs], ["X", "w_ca", "b_ca", "W_cs", "b_cs"]


def _stable_maps(r, W=3, H=3, C=3, margin=0.3):
    """Heatmaps whose per-location argmax and clamp sign are robust to small probes."""
    while True:
        Hm = r.standard_normal((W, H, C))
        top2 = np.sort(Hm, axis=2)[..., -2:]
        if (top2[..., 1] - top2[..., 0]).min() > margin and np.abs(top2[..., 1]).min() > margin \
                and (top2[..., 1] > 0).any():
            return Hm


def case_attention_weights(seed):
    r = _rng(seed)
    Hm = _stable_maps(r)

    def maps():
        return att.AttentionMaps(None, None, Hm)

    R = r.standard_normal(Hm.shape[0] * Hm.shape[1])

    def f():
        w = att.attention_weights(maps())
        return float(R @ w), [att.attention_weights_backward(maps(), R)]

    return f, [Hm], ["H"]


def case_attention_weighted_vlad(seed):
    """Feature map -> attention weights -> weighted VLAD, gradients into the filters."""
    r = _rng(seed)
    X = r.standard_normal((3, 3, 3))
    p = att.AttentionParams(r.standard_normal((3, 1)), np.array([3.0]),
                            r.standard_normal((3, 2)), np.array([1.0, 0.5]))
    cb = _codebook(r, 2, 3)
    R = r.standard_normal(6)

    def f():
        maps = att.attention_forward(X, p)
        w = att.attention_weights(maps)
        x2 = X.reshape(-1, 3)
        a = agg.soft_assign(x2, cb)
        raw = agg.vlad_residuals(x2, a, cb.centers, w, validate=False)
        v = agg.normalize_vlad(raw).v
        d_raw = agg.normalize_vlad_backward(raw, R)
        dx, da, _, dw = agg.vlad_residuals_backward(x2, a, cb.centers, w, d_raw)
        dx2, _ = agg.soft_assign_backward(x2, cb, a, da)
        d_H = att.attention_weights_backward(maps, dw)
        dX, g = att.attention_forward_backward(X, p, maps, d_H)
        return float(R @ v), [dX + (dx + dx2).reshape(X.shape), g["w_ca"], g["W_cs"], g["b_cs"]]

    return f, [X, p.w_ca, p.W_cs, p.b_cs], ["X", "w_ca", "W_cs", "b_cs"]


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


def gradcheck_state(pooling="vlad", attention=True, input_mode="features", D=3, K=2, C=2, seed=0, lam=0.4):
    """A float64 model with well-scaled random parameters for finite-difference checks."""
    cfg = TrainConfig(pooling=pooling, attention=attention, K=K, lam=lam, feature_dim=D,
                      hidden_channels=4, dtype="float64", init_std=0.3, alpha=1.0, seed=seed)
    in_ch = 3 if input_mode == "image" else D
    state = ModelState.create(cfg, C, in_ch, input_mode, rng=_rng(seed))
    r = _rng(seed + 1)
    p = state.params
    if "cb.s" in p:
        # assignment logits of order one: soft, not saturated
        p["cb.centers"][...] = r.standard_normal(p["cb.centers"].shape)
        p["cb.s"][...] = r.standard_normal(p["cb.s"].shape) / np.sqrt(2 * D)
        p["cb.h"][...] = 0.5 * r.standard_normal(p["cb.h"].shape)
    # positive offsets keep class maxima away from the clamp
    p["att.b_ca"][...] = 1.0
    p["att.b_cs"][...] = r.uniform(0.3, 0.6, p["att.b_cs"].shape)
    if input_mode == "image":
        # He-scaled convs give O(1) features; shrink so heatmap products stay O(1)
        p["conv2.w"] *= 0.5
    return state


def _model_case(state, x, label, stage=2):
    names = sorted(state.params)
    if stage == 1:
        names = [n for n in names if not n.startswith(("cb.", "cls."))]

    def f():
        _, losses, grads = loss_and_grads(state, x, label, stage=stage)
        return losses[0], [grads[n] for n in names]

    return f, [state.params[n] for n in names], names


def case_joint_vlad_features(seed):
    """Joint loss through attentional VLAD on a 4x4x3 feature map, K=2, C=2."""
    state = gradcheck_state("vlad", True, "features", D=3, K=2, C=2, seed=seed)
    x = _rng(seed + 2).standard_normal((4, 4, 3))
    return _model_case(state, x, 1)


def case_joint_vlad_image(seed):
    """Every trainable parameter, 8x8x3 image, D=6, K=2, C=2."""
    state = gradcheck_state("vlad", True, "image", D=6, K=2, C=2, seed=seed)
    x = _rng(seed + 2).standard_normal((8, 8, 3))
    return _model_case(state, x, 0)


def case_joint_bow(seed):
    state = gradcheck_state("bow", True, "features", D=3, K=3, C=2, seed=seed)
    return _model_case(state, _rng(seed + 2).standard_normal((4, 4, 3)), 1)


def case_joint_gap(seed):
    state = gradcheck_state("gap", True, "features", D=3, C=3, seed=seed)
    return _model_case(state, _rng(seed + 2).standard_normal((4, 4, 3)), 2)


def case_joint_vlad_no_attention(seed):
    state = gradcheck_state("vlad", False, "features", D=3, K=2, C=2, seed=seed)
    return _model_case(state, _rng(seed + 2).standard_normal((4, 4, 3)), 0)


def case_stage1_image(seed):
    state = gradcheck_state("vlad", True, "image", D=6, K=2, C=2, seed=seed)
    return _model_case(state, _rng(seed + 2).standard_normal((8, 8, 3)), 1, stage=1)


CASES = {
    "numerics": [
        ("conv2d_1x1", case_conv1x1),
        ("conv2d_3x3", case_conv3x3),
        ("relu", case_relu),
        ("maxpool2", case_maxpool),
        ("cross_entropy", case_cross_entropy),
    ],
    "aggregation": [
        ("soft_assign[direct]", case_soft_assign_direct),
        ("soft_assign[decoupled]", case_soft_assign_decoupled),
        ("vlad", case_vlad_unweighted),
        ("vlad[weighted]", case_vlad_weighted),
        ("normalize_vlad", case_normalize_vlad),
        ("bow", case_bow_unweighted),
        ("bow[weighted]", case_bow_weighted),
        ("gap", case_gap_unweighted),
        ("gap[weighted]", case_gap_weighted),
        ("assign->vlad->normalize", case_attentional_vlad_chain),
    ],
    "attention": [
        ("attention_loss", case_attention_loss),
        ("attention_weights", case_attention_weights),
        ("weights->vlad", case_attention_weighted_vlad),
    ],
    "model": [
        ("joint[vlad,features]", case_joint_vlad_features),
        ("joint[vlad,image]", case_joint_vlad_image),
        ("joint[bow]", case_joint_bow),
        ("joint[gap]", case_joint_gap),
        ("joint[vlad,no-attention]", case_joint_vlad_no_attention),
        ("stage1[image]", case_stage1_image),
    ],
}


def run_case(builder, step=1e-5, tol=1e-6, seed=0):
    f, params, names = builder(seed)
    return nx.gradcheck(f, params, step=step, tol_rel=tol, names=names, seed=seed)


def run_suite(module="all", tol=1e-6, step=1e-5, seed=0):
    modules = MODULES if module == "all" else (module,)
    results = []
    for mod in modules:
        for name, builder in CASES[mod]:
            results.append(CaseResult(mod, name, run_case(builder, step, tol, seed)))
    return results
