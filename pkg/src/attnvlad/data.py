"""Synthetic signal-vs-distractor datasets, the AFM1 array format and manifests.

On disk a dataset directory holds::

    dataset.txt        key = value metadata (generator settings + sanity statistics)
    manifest.tsv       path<TAB>label<TAB>split, paths relative to the directory
    train/<id>.afm     one AFM1 array per sample (feature map, or image with D=3)
    train/<id>_mask.afm  ground-truth signal cells, AFM1 with D=1 and values {0,1}
"""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError
from .seeding import substream

AFM_MAGIC = b"AFM1"
AFM_HEADER = struct.Struct("<4sIII")
SPLITS = ("train", "test")
VARIANTS = ("features", "image")


# ---------------------------------------------------------------------------
# AFM1
# ---------------------------------------------------------------------------


def write_feature_map(path, fm):
    fm = np.asarray(fm)
    if fm.ndim == 2:
        fm = fm[..., None]
    if fm.ndim != 3:
        raise ValueError(f"feature map must be (W, H, D), got shape {fm.shape}")
    if not np.all(np.isfinite(fm)):
        raise FormatError("non_finite", path, "refusing to write NaN/Inf")
    W, H, D = fm.shape
    with open(path, "wb") as fh:
        fh.write(AFM_HEADER.pack(AFM_MAGIC, W, H, D))
        fh.write(np.ascontiguousarray(fm, dtype="<f4").tobytes())


def read_feature_map(path):
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != AFM_MAGIC:
        raise FormatError("bad_magic", path, f"expected {AFM_MAGIC!r}, got {data[:4]!r}")
    if len(data) < AFM_HEADER.size:
        raise FormatError("truncated", path, "header shorter than 16 bytes")
    _, W, H, D = AFM_HEADER.unpack_from(data)
    payload = len(data) - AFM_HEADER.size
    expected = 4 * W * H * D
    if payload != expected:
        raise FormatError(
            "size_mismatch", path,
            f"header {W}x{H}x{D} needs {expected} payload bytes, found {payload}",
        )
    fm = np.frombuffer(data, dtype="<f4", offset=AFM_HEADER.size).reshape(W, H, D).astype(np.float32)
    if not np.all(np.isfinite(fm)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(fm))[0])
        raise FormatError("non_finite", path, f"first at index {bad}")
    return fm


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    num_classes: int = 8
    train_per_class: int = 20
    test_per_class: int = 20
    width: int = 6
    height: int = 6
    dim: int = 16
    variant: str = "features"
    cell_px: int = 4
    signal_fraction: float = 0.15
    signal_strength: float = 1.0
    distractor_pool: int = 32
    distractor_fraction: float = 0.6
    distractor_strength: float = 1.0
    noise_sigma: float = 0.3
    signal_modes: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("num_classes", "train_per_class", "test_per_class", "width", "height",
                     "dim", "cell_px", "distractor_pool", "signal_modes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not 0 <= self.distractor_fraction < 1:
            raise ValueError("distractor_fraction must be in [0, 1)")
        if not 0 < self.signal_fraction <= 1:
            raise ValueError("signal_fraction must be in (0, 1]")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @property
    def cells(self):
        return self.width * self.height

    @property
    def descriptor_dim(self):
        return self.dim if self.variant == "features" else self.cell_px * self.cell_px * 3

    def cell_counts(self):
        N = self.cells
        n_sig = max(1, int(round(self.signal_fraction * N)))
        n_dis = min(int(round(self.distractor_fraction * N)), N - n_sig)
        return n_sig, n_dis


@dataclass
class Sample:
    sample_id: str
    x: np.ndarray  # (W, H, D) feature map or (W*px, H*px, 3) image
    label: int
    mask: np.ndarray  # (W, H) in {0, 1}
    split: str


@dataclass
class SyntheticSet:
    spec: SyntheticSpec
    train: list
    test: list
    stats: dict = field(default_factory=dict)

    @property
    def num_classes(self):
        return self.spec.num_classes


def _unit_rows(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _to_image(desc, spec):
    # (W, H, px*px*3) -> (W*px, H*px, 3)
    W, H, px = spec.width, spec.height, spec.cell_px
    return desc.reshape(W, H, px, px, 3).transpose(0, 2, 1, 3, 4).reshape(W * px, H * px, 3)


def _mean_pairwise_cosine(vectors):
    n = np.linalg.norm(vectors, axis=1, keepdims=True)
    u = vectors / np.where(n == 0, 1, n)
    g = u @ u.T
    iu = np.triu_indices(len(u), 1)
    return float(g[iu].mean())


def synth_arrays(spec: SyntheticSpec) -> SyntheticSet:
    """Generate a dataset in memory.

    Each sample scatters ``signal_fraction`` of its cells with noisy copies of
    one of its class prototypes (``signal_modes`` per class) and
    ``distractor_fraction`` with noisy vectors drawn
    from a pool shared by every class; remaining cells get near-zero noise.
    """
    rng = substream(spec.seed, "synth")
    Dd = spec.descriptor_dim
    protos = _unit_rows(rng, spec.num_classes * spec.signal_modes, Dd).reshape(
        spec.num_classes, spec.signal_modes, Dd)
    pool = _unit_rows(rng, spec.distractor_pool, Dd)
    n_sig, n_dis = spec.cell_counts()
    N = spec.cells
    out = {}
    gap_means = np.zeros((spec.num_classes, Dd))
    sig_means = np.zeros((spec.num_classes, Dd))
    for split in SPLITS:
        per_class = spec.train_per_class if split == "train" else spec.test_per_class
        samples = []
        for c in range(spec.num_classes):
            for n in range(per_class):
                order = rng.permutation(N)
                desc = rng.standard_normal((N, Dd)) * (0.1 * spec.noise_sigma)
                sig, dis = order[:n_sig], order[n_sig:n_sig + n_dis]
                modes = rng.integers(spec.signal_modes, size=n_sig)
                desc[sig] = spec.signal_strength * protos[c, modes] + spec.noise_sigma * rng.standard_normal((n_sig, Dd))
                picks = rng.integers(spec.distractor_pool, size=n_dis)
                desc[dis] = spec.distractor_strength * pool[picks] + spec.noise_sigma * rng.standard_normal((n_dis, Dd))
                mask = np.zeros(N)
                mask[sig] = 1
                if split == "train":
                    gap_means[c] += desc.mean(axis=0) / per_class
                    sig_means[c] += desc[sig].mean(axis=0) / per_class
                desc = desc.reshape(spec.width, spec.height, Dd)
                x = desc if spec.variant == "features" else _to_image(desc, spec)
                samples.append(Sample(
                    f"{split}_{len(samples):05d}", x.astype(np.float32), c,
                    mask.reshape(spec.width, spec.height), split,
                ))
        out[split] = samples
    stats = {
        "gap_mean_cosine": _mean_pairwise_cosine(gap_means),
        "signal_mean_cosine": _mean_pairwise_cosine(sig_means),
        "signal_cells": n_sig,
        "distractor_cells": n_dis,
    }
    return SyntheticSet(spec, out["train"], out["test"], stats)


# ---------------------------------------------------------------------------
# Manifests and on-disk datasets
# ---------------------------------------------------------------------------


@dataclass
class ManifestRecord:
    path: str
    label: int
    split: str


@dataclass
class DatasetManifest:
    root: Path
    records: list
    num_classes: int


def _format_value(v):
    return repr(v) if isinstance(v, float) else str(v)


def write_meta(path, values: dict):
    with open(path, "w") as fh:
        for k, v in values.items():
            fh.write(f"{k} = {_format_value(v)}\n")


def read_meta(path):
    meta = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            k, _, v = line.partition("=")
            meta[k.strip()] = v.strip()
    return meta


def synth_generate(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    """Write a synthetic dataset (arrays, masks, manifest, metadata) under ``out_dir``."""
    ds = synth_arrays(spec)
    root = Path(out_dir)
    records = []
    for split, samples in (("train", ds.train), ("test", ds.test)):
        (root / split).mkdir(parents=True, exist_ok=True)
        for s in samples:
            rel = f"{split}/{s.sample_id}.afm"
            write_feature_map(root / rel, s.x)
            write_feature_map(root / split / f"{s.sample_id}_mask.afm", s.mask.astype(np.float32))
            records.append(ManifestRecord(rel, s.label, split))
    with open(root / "manifest.tsv", "w") as fh:
        for r in records:
            fh.write(f"{r.path}\t{r.label}\t{r.split}\n")
    write_meta(root / "dataset.txt", {**asdict(spec), **ds.stats})
    return DatasetManifest(root, records, spec.num_classes)


def load_manifest(root, num_classes=None) -> DatasetManifest:
    root = Path(root)
    mpath = root / "manifest.tsv"
    if not mpath.exists():
        raise DataError(f"{mpath}: manifest not found")
    if num_classes is None:
        meta_path = root / "dataset.txt"
        if not meta_path.exists():
            raise DataError(f"{meta_path}: dataset metadata not found")
        num_classes = int(read_meta(meta_path)["num_classes"])
    records = []
    for lineno, line in enumerate(mpath.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{mpath}:{lineno}: expected path<TAB>label<TAB>split")
        path, label, split = parts
        try:
            label = int(label)
        except ValueError:
            raise DataError(f"{mpath}:{lineno}: label {label!r} is not an integer") from None
        if not 0 <= label < num_classes:
            raise DataError(f"{mpath}:{lineno}: label {label} outside [0, {num_classes})")
        if split not in SPLITS:
            raise DataError(f"{mpath}:{lineno}: unknown split {split!r}")
        if not (root / path).exists():
            raise DataError(f"{mpath}:{lineno}: missing file {path}")
        records.append(ManifestRecord(path, label, split))
    if not records:
        raise DataError(f"{mpath}: manifest is empty")
    return DatasetManifest(root, records, num_classes)


def mask_path(sample_path):
    p = Path(sample_path)
    return p.with_name(p.stem + "_mask.afm")


@dataclass
class Dataset:
    train: list
    test: list
    num_classes: int
    variant: str = "features"

    def split(self, name):
        return self.train if name == "train" else self.test


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = load_manifest(root)
    meta = read_meta(root / "dataset.txt")
    splits = {s: [] for s in SPLITS}
    for r in manifest.records:
        path = root / r.path
        x = read_feature_map(path)
        mp = mask_path(path)
        mask = read_feature_map(mp)[..., 0] if mp.exists() else None
        splits[r.split].append(Sample(Path(r.path).stem, x, r.label, mask, r.split))
    return Dataset(splits["train"], splits["test"], manifest.num_classes, meta.get("variant", "features"))


def spec_fields():
    return {f.name: f for f in fields(SyntheticSpec)}


# ---------------------------------------------------------------------------
# Attention quality
# ---------------------------------------------------------------------------


def attention_quality(weights, signal_mask):
    """Attention mass falling on ground-truth signal cells.

    ``weights`` may be an :class:`AttentionMaps` with weights filled in or a
    flat array of per-location weights.
    """
    w = getattr(weights, "weights", weights)
    if w is None:
        raise ValueError("attention maps carry no weights")
    w = np.asarray(w).reshape(-1)
    m = np.asarray(signal_mask).reshape(-1)
    if m.shape != w.shape:
        raise ValueError(f"mask has {m.size} cells, weights have {w.size}")
    if not np.any(m > 0.5):
        raise ValueError("signal mask is empty")
    return float(np.clip(w[m > 0.5].sum(), 0.0, 1.0))
