"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""
import time

import numpy as np
import pytest

from attnvlad import aggregation as ag
from attnvlad import cli
from attnvlad import experiments as ex
from attnvlad.attention import AttentionMaps, attention_weights
from attnvlad.codebook import init_decoupled
from attnvlad.data import SyntheticSpec, read_feature_map, synth_arrays, write_feature_map
from attnvlad.errors import FormatError
from attnvlad.model import TrainConfig, checkpoint_bytes, evaluate, load_checkpoint, save_checkpoint, train

SEEDS = range(5)


def test_criterion_1_gradient_suite(criterion, capsys):
    t0 = time.perf_counter()
    code = cli.main(["gradcheck", "--module", "all", "--tol", "1e-6", "--step", "1e-5"])
    secs = time.perf_counter() - t0
    out = capsys.readouterr().out
    summary = out.strip().splitlines()[-1]
    ok = code == 0 and secs < 120
    assert criterion(1, "gradcheck --module all at tol 1e-6", ok, f"{summary}; {secs:.1f}s (limit 120s)")


def test_criterion_2_algebraic_identities(criterion):
    r = np.random.default_rng(2024)
    eq_diff = 0.0
    for _ in range(1000):
        K, D = int(r.integers(1, 8)), int(r.integers(1, 6))
        cb = init_decoupled(r.standard_normal((K, D)), float(r.choice([0.1, 1.0, 10.0, 100.0])))
        x = r.standard_normal((int(r.integers(1, 5)), D))
        eq_diff = max(eq_diff, np.abs(ag.soft_assign(x, cb, "direct") - ag.soft_assign(x, cb, "decoupled")).max())

    uni_diff = row_err = w_err = norm_err = 0.0
    for _ in range(300):
        N, K, D = int(r.integers(1, 20)), int(r.integers(1, 6)), int(r.integers(1, 5))
        X = r.standard_normal((N, D)) * r.choice([0.1, 1.0, 10.0])
        cb = init_decoupled(r.standard_normal((K, D)), float(r.choice([1.0, 100.0])))
        for mode in ("direct", "decoupled"):
            a = ag.soft_assign(X, cb, mode)
            row_err = max(row_err, np.abs(a.sum(axis=1) - 1).max())
        plain = ag.normalize_vlad(ag.vlad_aggregate(X, a, cb)).v
        uni = ag.normalize_vlad(ag.vlad_aggregate(X, a, cb, np.full(N, 1 / N))).v
        uni_diff = max(uni_diff, np.abs(plain - uni).max())
        if np.any(plain):
            norm_err = max(norm_err, abs(np.linalg.norm(plain) - 1))
        H = r.standard_normal((int(r.integers(1, 5)), int(r.integers(1, 5)), int(r.integers(2, 5))))
        H = H - r.choice([0.0, 5.0])  # include the all-non-positive fallback
        w = attention_weights(AttentionMaps(np.ones(H.shape[:2]), H, H))
        w_err = max(w_err, abs(w.sum() - 1))
    ok = eq_diff <= 1e-10 and uni_diff <= 1e-6 and row_err <= 1e-6 and w_err <= 1e-6 and norm_err <= 1e-6
    detail = (f"assign max|direct-decoupled|={eq_diff:.1e} (<=1e-10), uniform reduction {uni_diff:.1e}, "
              f"rows {row_err:.1e}, weights {w_err:.1e}, unit norm {norm_err:.1e} (<=1e-6)")
    assert criterion(2, "algebraic identities", ok, detail)


def test_criterion_3_geometric_property(criterion):
    X1, X2, cb, w1, w2 = ag.opposite_distractor_pair()
    plain = ag.residual_cosines(X1, X2, cb)[0]
    oracle = ag.residual_cosines(X1, X2, cb, w1, w2)[0]
    ok = plain < 0 and oracle == 1.0
    assert criterion(3, "opposite-distractor construction", ok,
                     f"cosine without attention {plain:+.6f} (<0), with oracle attention {oracle:.6f} (=1)")


@pytest.fixture(scope="module")
def ablation_run():
    t0 = time.perf_counter()
    summary = ex.ablation(SEEDS)
    return summary, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_4_synthetic_ablation(criterion, ablation_run):
    summary, secs = ablation_run
    att = summary.mean_accuracy("att-netvlad")
    plain = summary.mean_accuracy("netvlad")
    gap = summary.mean_accuracy("att-gap")
    ok = att >= plain + 0.05 and att >= gap and secs < 600
    print("\n" + summary.table())
    assert criterion(4, "Att-NetVLAD >= NetVLAD + 5 pts and >= Att-GAP (5 seeds)", ok,
                     f"att-netvlad {att:.3f}, netvlad {plain:.3f} (+{100 * (att - plain):.1f} pts), "
                     f"att-gap {gap:.3f}; {secs:.0f}s (limit 600s)")


@pytest.mark.slow
def test_criterion_5_attention_localization(criterion, ablation_run):
    summary, _ = ablation_run
    q = summary.mean_quality("att-netvlad")
    base = ex.signal_fraction(ex.ABLATION_SPEC)
    ok = q >= 2 * base
    assert criterion(5, "attention quality >= 2x signal-cell fraction (5 seeds)", ok,
                     f"quality {q:.3f}, uniform baseline {base:.3f}, ratio {q / base:.2f}")


@pytest.mark.slow
def test_criterion_6_lambda_robustness(criterion):
    summary = ex.lambda_sweep(ex.LAMBDAS, SEEDS)
    means = {lam: summary.mean_accuracy(f"{lam:g}") for lam in ex.LAMBDAS}
    spread = max(means.values()) - min(means.values())
    ok = spread <= 0.05
    per = ", ".join(f"{lam:g}: {acc:.3f}" for lam, acc in means.items())
    assert criterion(6, "accuracy spread over lambda <= 5 pts", ok, f"{per}; spread {100 * spread:.1f} pts")


def test_criterion_7_determinism(criterion, tmp_path):
    spec = "num_classes = 4\ntrain_per_class = 8\ntest_per_class = 4\nwidth = 4\nheight = 4\ndim = 8\n"
    (tmp_path / "spec.cfg").write_text(spec)
    (tmp_path / "train.cfg").write_text("K = 4\nalpha = 10\nstage1_lr = 0.01\nstage1_epochs = 3\n"
                                        "stage2_epochs = 4\nstage2_shared_lr = 0.001\n")
    assert cli.main(["synth", "--spec", str(tmp_path / "spec.cfg"), "--out", str(tmp_path / "ds")]) == 0
    outs = []
    for run in ("a", "b"):
        ckpt = tmp_path / f"{run}.ckpt"
        assert cli.main(["train", "--config", str(tmp_path / "train.cfg"), "--data", str(tmp_path / "ds"),
                         "--out", str(ckpt), "--seed", "11"]) == 0
        outs.append((ckpt.read_bytes(), cli.metrics_path(ckpt).read_text()))
    same_ckpt = outs[0][0] == outs[1][0]
    same_log = outs[0][1] == outs[1][1]
    assert criterion(7, "identical seed/config -> identical outputs", same_ckpt and same_log,
                     f"checkpoints byte-identical: {same_ckpt}, metrics logs identical: {same_log}")


def test_criterion_8_format_round_trips(criterion, tmp_path):
    checks = {}
    fm = np.random.default_rng(8).standard_normal((5, 3, 7)).astype(np.float32)
    write_feature_map(tmp_path / "x.afm", fm)
    checks["afm round trip"] = read_feature_map(tmp_path / "x.afm").tobytes() == fm.tobytes()

    ds = synth_arrays(SyntheticSpec(num_classes=3, train_per_class=4, test_per_class=3, width=4, height=4, dim=6))
    cfg = TrainConfig(K=3, alpha=10.0, stage1_epochs=2, stage2_epochs=2, stage1_lr=1e-2, flip_avg=True)
    state, _ = train(ds, cfg, eval_test=False)
    save_checkpoint(state, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(back, tmp_path / "b.ckpt")
    checks["ckpt save-load-save"] = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    e1, e2 = evaluate(state, ds.test), evaluate(back, ds.test)
    checks["ckpt eval identical"] = e1.accuracy == e2.accuracy and e1.loss_total == e2.loss_total

    afm = (tmp_path / "x.afm").read_bytes()
    ckpt = checkpoint_bytes(state)
    fixtures = {
        ("afm", "bad_magic"): b"XFM1" + afm[4:],
        ("afm", "size_mismatch"): afm[:4] + (6).to_bytes(4, "little") + afm[8:],
        ("afm", "truncated"): afm[:10],
        ("ckpt", "bad_magic"): b"GGAA" + ckpt[4:],
        ("ckpt", "bad_version"): ckpt[:4] + (99).to_bytes(4, "little") + ckpt[8:],
        ("ckpt", "truncated"): ckpt[: len(ckpt) // 2],
    }
    for (fmt, kind), blob in fixtures.items():
        path = tmp_path / f"{kind}.{fmt}"
        path.write_bytes(blob)
        try:
            (read_feature_map if fmt == "afm" else load_checkpoint)(path)
            got = None
        except FormatError as e:
            got = e.kind
        checks[f"{fmt} {kind}"] = got == kind
    bad = [k for k, v in checks.items() if not v]
    assert criterion(8, "AFM1/checkpoint round trips and corrupted headers", not bad,
                     f"{len(checks) - len(bad)}/{len(checks)} checks ok" + (f"; failed: {bad}" if bad else ""))
