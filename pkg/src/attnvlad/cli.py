"""Command-line entry point: ``attnvlad <command> ...``.

Exit codes: 0 ok, 1 training failure, 2 config error, 3 data error, 4 gradcheck failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import checks
from .attention import attention_weights, export_heatmaps
from .data import SyntheticSpec, attention_quality, load_dataset, synth_generate
from .errors import ConfigError, DataError, FormatError, TrainingError
from .model import (
    METRICS_HEADER,
    MetricsRecord,
    TrainConfig,
    evaluate,
    forward_joint,
    format_metrics,
    load_checkpoint,
    save_checkpoint,
    train,
)

EXIT_TRAIN, EXIT_CONFIG, EXIT_DATA, EXIT_GRADCHECK = 1, 2, 3, 4

# config-file spellings that differ from the dataclass field names
ALIASES = {"lambda": "lam"}

log = logging.getLogger("attnvlad")


# ---------------------------------------------------------------------------
# key = value configs
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    train: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)

    def train_config(self, **overrides):
        try:
            return TrainConfig(**{**self.train, **overrides})
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None

    def synth_spec(self, **overrides):
        try:
            return SyntheticSpec(**{**self.synth, **overrides})
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None


def _field_types(cls):
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


TRAIN_TYPES = _field_types(TrainConfig)
SYNTH_TYPES = _field_types(SyntheticSpec)


def parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected on/off, got {text!r}")


def convert(text, typ):
    """Parse ``text`` as ``typ``; handles ``X | None`` by accepting ``none``."""
    if isinstance(typ, types.UnionType) or typing.get_origin(typ) is typing.Union:
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if text.strip().lower() == "none":
            return None
        typ = args[0]
    if typ is bool:
        return parse_bool(text)
    if typ is int:
        return int(text)
    if typ is float:
        return float(text)
    return text.strip().strip("\"'")


def parse_config(text, path=None) -> RunConfig:
    """Read ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        key = key.strip()
        if not eq or not key:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno, path)
        name = ALIASES.get(key, key)
        known = False
        for types_, target in ((TRAIN_TYPES, cfg.train), (SYNTH_TYPES, cfg.synth)):
            if name in types_:
                known = True
                try:
                    target[name] = convert(value, types_[name])
                except ValueError as e:
                    raise ConfigError(f"bad value for {key}: {e}", lineno, path) from None
        if not known:
            raise ConfigError(f"unknown key {key!r}", lineno, path)
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError("config file not found", path=p)
    return parse_config(p.read_text(), p)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _on_off(text):
    return parse_bool(text)


def _load_data(root):
    if not Path(root).is_dir():
        raise DataError(f"{root}: dataset directory not found")
    ds = load_dataset(root)
    if not ds.train and not ds.test:
        raise DataError(f"{root}: dataset has no samples")
    return ds


def cmd_synth(args):
    overrides = {"seed": args.seed} if args.seed is not None else {}
    spec = load_config(args.spec).synth_spec(**overrides)
    manifest = synth_generate(spec, args.out)
    print(f"wrote {len(manifest.records)} samples ({spec.num_classes} classes, {spec.variant}) to {args.out}")
    return 0


def _train_overrides(args):
    kw = {}
    if args.pooling is not None:
        kw["pooling"] = args.pooling
    if args.attention is not None:
        kw["attention"] = args.attention
    if args.seed is not None:
        kw["seed"] = args.seed
    if getattr(args, "lam", None) is not None:
        kw["lam"] = args.lam
    return kw


def metrics_path(ckpt):
    return Path(str(ckpt) + ".metrics.txt")


def cmd_train(args):
    cfg = load_config(args.config).train_config(**_train_overrides(args))
    ds = _load_data(args.data)
    state, records = train(ds, cfg, eval_test=bool(ds.test))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state, out)
    mpath = Path(args.metrics) if args.metrics else metrics_path(out)
    mpath.write_text(format_metrics(records))
    last = records[-1] if records else None
    if last is not None:
        print(f"final {last.split} acc={last.acc:.4f} loss_total={last.loss_total:.4f}")
    print(f"checkpoint: {out}\nmetrics: {mpath}")
    return 0


def eval_record(state, result, split):
    return MetricsRecord(state.cfg.stage2_epochs, 2, split, result.loss_cls, result.loss_att,
                         result.loss_total, result.accuracy)


def cmd_eval(args):
    state = load_checkpoint(args.ckpt)
    ds = _load_data(args.data)
    samples = ds.split(args.split)
    if not samples:
        raise DataError(f"{args.data}: split {args.split!r} is empty")
    res = evaluate(state, samples, flip_avg=args.flip_avg)
    rec = eval_record(state, res, args.split)
    print(f"accuracy            {res.accuracy:.4f}")
    print(f"mean class accuracy {res.mean_class_accuracy:.4f}")
    print("per-class           " + " ".join(f"{a:.3f}" for a in res.per_class_accuracy))
    print(METRICS_HEADER)
    print(rec.line())
    if args.metrics:
        Path(args.metrics).write_text(format_metrics([rec]))
    return 0


def cmd_gradcheck(args):
    results = checks.run_suite(args.module, tol=args.tol, step=args.step, seed=args.seed)
    failed = 0
    for r in results:
        flag = "PASS" if r.report.passed else "FAIL"
        print(f"{flag} {r.module}/{r.name}  max_rel_err={r.report.max_rel_err:.2e}")
        if not r.report.passed or args.verbose:
            print(r.report.summary())
        failed += not r.report.passed
    print(f"{len(results) - failed}/{len(results)} cases passed at tol {args.tol:g}")
    return EXIT_GRADCHECK if failed else 0


def cmd_export_attention(args):
    state = load_checkpoint(args.ckpt)
    ds = _load_data(args.data)
    samples = ds.split(args.split)
    if args.limit is not None:
        samples = samples[:args.limit]
    qualities, baselines, written = [], [], 0
    for s in samples:
        out = forward_joint(state, s.x)
        written += len(export_heatmaps(args.out, s.sample_id, out.maps, per_class=args.per_class))
        if s.mask is not None and s.mask.any():
            w = out.maps.weights if out.maps.weights is not None else attention_weights(out.maps)
            qualities.append(attention_quality(w, s.mask))
            baselines.append(float(s.mask.mean()))
    print(f"wrote {written} heatmaps to {args.out}")
    if qualities:
        q, b = float(np.mean(qualities)), float(np.mean(baselines))
        print(f"attention_quality mean={q:.4f} uniform_baseline={b:.4f} ratio={q / b:.2f} n={len(qualities)}")
    return 0


def parse_lambdas(text):
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"--lambdas must be comma-separated numbers, got {text!r}") from None
    if not vals or any(v < 0 for v in vals):
        raise ConfigError("--lambdas needs at least one non-negative value")
    return vals


def cmd_ablate(args):
    lambdas = parse_lambdas(args.lambdas)
    base = load_config(args.config).train_config(**_train_overrides(args))
    ds = _load_data(args.data)
    if not ds.test:
        raise DataError(f"{args.data}: ablation needs a test split")
    rows = ["lambda," + METRICS_HEADER]
    for lam in lambdas:
        state, _ = train(ds, replace(base, lam=lam), eval_test=False)
        rec = eval_record(state, evaluate(state, ds.test), "test")
        rows.append(f"{lam:g},{rec.line()}")
        log.info(rows[-1])
    text = "\n".join(rows) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="attnvlad", description="Attention-aware VLAD pooling at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch metrics to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--spec", help="key = value file with dataset fields")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    def train_flags(q):
        q.add_argument("--config", help="key = value file with training fields")
        q.add_argument("--data", required=True, help="dataset directory")
        q.add_argument("--pooling", choices=["vlad", "bow", "gap"])
        q.add_argument("--attention", type=_on_off, metavar="on|off")
        q.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="two-stage training; writes a checkpoint and a metrics log")
    train_flags(t)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--lambda", dest="lam", type=float, help="weight of the attention loss")
    t.add_argument("--metrics", help="metrics log path (default: <out>.metrics.txt)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--flip-avg", type=_on_off, metavar="on|off", help="default: the checkpoint's setting")
    e.add_argument("--split", choices=["train", "test"], default="test")
    e.add_argument("--metrics", help="also write the record in metrics-log format")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--module", choices=("all",) + checks.MODULES, default="all")
    g.add_argument("--tol", type=float, default=1e-6)
    g.add_argument("--step", type=float, default=1e-5)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("export-attention", help="write attention heatmaps as PGM")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--per-class", action="store_true", help="one map per class instead of the class max")
    x.add_argument("--split", choices=["train", "test"], default="test")
    x.add_argument("--limit", type=int, help="export at most this many samples")
    x.set_defaults(func=cmd_export_attention)

    a = sub.add_parser("ablate", help="test accuracy for each lambda")
    train_flags(a)
    a.add_argument("--lambdas", default="1e-4,0.01,0.4,1")
    a.add_argument("--out", help="also write the table here")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as e:
        print(f"training failed: {e}", file=sys.stderr)
        return EXIT_TRAIN


if __name__ == "__main__":
    sys.exit(main())
