"""Synthetic proxy experiments: pooling ablation, attention localization and lambda sweep.

Everything here runs in memory at desk scale; the numbers are a proxy for the
ordering of methods, not for any benchmark accuracy.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import attention_weights
from .data import SyntheticSpec, attention_quality, synth_arrays
from .model import TrainConfig, evaluate, forward_joint, train

# Feature-level set with a sparse class signal and strong shared distractors.
ABLATION_SPEC = SyntheticSpec(
    num_classes=8, train_per_class=40, test_per_class=20, width=6, height=6, dim=16,
    signal_fraction=0.1, signal_strength=1.5, distractor_fraction=0.6, distractor_strength=2.0,
    noise_sigma=0.3,
)

# Desk-scale recipe: same structure as the full recipe, larger rates and fewer epochs.
DESK_TRAIN = TrainConfig(
    K=8, alpha=10.0, stage1_lr=1e-2, stage1_epochs=20, stage2_cls_lr=1e-2, stage2_shared_lr=1e-3,
    stage2_epochs=30, lr_decay_every=15, flip_avg=False,
)

VARIANTS = {
    "att-netvlad": dict(pooling="vlad", attention=True),
    "netvlad": dict(pooling="vlad", attention=False),
    "att-gap": dict(pooling="gap", attention=True),
    "gap": dict(pooling="gap", attention=False),
    "att-bow": dict(pooling="bow", attention=True),
    "bow": dict(pooling="bow", attention=False),
}

LAMBDAS = (1e-4, 0.01, 0.4, 1.0)


@dataclass
class RunResult:
    variant: str
    seed: int
    accuracy: float
    quality: float | None  # attention mass on signal cells, None without attention
    seconds: float


@dataclass
class Summary:
    runs: list = field(default_factory=list)

    def by(self, key):
        out = {}
        for r in self.runs:
            out.setdefault(getattr(r, key), []).append(r)
        return out

    def mean_accuracy(self, variant):
        return float(np.mean([r.accuracy for r in self.runs if r.variant == variant]))

    def mean_quality(self, variant):
        return float(np.mean([r.quality for r in self.runs if r.variant == variant]))

    def table(self):
        lines = [f"{'variant':<14}{'acc':>8}{'std':>8}{'quality':>9}  per-seed"]
        for name, runs in self.by("variant").items():
            acc = np.array([r.accuracy for r in runs])
            q = [r.quality for r in runs if r.quality is not None]
            qs = f"{np.mean(q):9.3f}" if q else f"{'-':>9}"
            lines.append(f"{name:<14}{acc.mean():8.3f}{acc.std():8.3f}{qs}  "
                         + " ".join(f"{a:.3f}" for a in acc))
        return "\n".join(lines)


def signal_fraction(spec: SyntheticSpec):
    """Uniform-attention baseline for attention quality: the actual share of signal cells."""
    return spec.cell_counts()[0] / spec.cells


def mean_quality(state, samples):
    return float(np.mean([
        attention_quality(attention_weights(forward_joint(state, s.x).maps), s.mask) for s in samples
    ]))


def run_variant(dataset, cfg: TrainConfig, variant, seed):
    t0 = time.perf_counter()
    cfg = replace(cfg, seed=seed, **VARIANTS.get(variant, {}))
    state, _ = train(dataset, cfg, eval_test=False)
    acc = evaluate(state, dataset.test).accuracy
    q = mean_quality(state, dataset.test) if cfg.attention else None
    return RunResult(variant, seed, acc, q, time.perf_counter() - t0)


def ablation(seeds=range(5), variants=("att-netvlad", "netvlad", "att-gap"), spec=ABLATION_SPEC,
             cfg=DESK_TRAIN, progress=None) -> Summary:
    """Train each pooling variant on one synthetic set per seed and score the test split."""
    out = Summary()
    for seed in seeds:
        ds = synth_arrays(replace(spec, seed=seed))
        for v in variants:
            r = run_variant(ds, cfg, v, seed)
            out.runs.append(r)
            if progress:
                progress(r)
    return out


def lambda_sweep(lambdas=LAMBDAS, seeds=range(5), spec=ABLATION_SPEC, cfg=DESK_TRAIN, progress=None) -> Summary:
    """Attentional NetVLAD accuracy per lambda; ``variant`` holds the lambda as text."""
    out = Summary()
    for seed in seeds:
        ds = synth_arrays(replace(spec, seed=seed))
        for lam in lambdas:
            r = run_variant(ds, replace(cfg, lam=lam), "att-netvlad", seed)
            r.variant = f"{lam:g}"
            out.runs.append(r)
            if progress:
                progress(r)
    return out
