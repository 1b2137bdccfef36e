import pytest

from attnvlad import cli
from attnvlad.errors import ConfigError

SPEC = """\
# small separable set
num_classes = 3
train_per_class = 10
test_per_class = 5
width = 4
height = 4
dim = 8
distractor_fraction = 0.0
noise_sigma = 0.1
"""

TRAIN = """\
K = 4
alpha = 10
stage1_lr = 0.01
stage1_epochs = 4
stage2_epochs = 8
stage2_shared_lr = 0.001
lambda = 0.4   # attention loss weight
flip_avg = off
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "spec.cfg").write_text(SPEC)
    (d / "train.cfg").write_text(TRAIN)
    assert cli.main(["synth", "--spec", str(d / "spec.cfg"), "--out", str(d / "ds")]) == 0
    return d


def test_parse_config_types_and_alias():
    cfg = cli.parse_config("lambda = 0.1\nK = none\nattention = off\npooling = gap\nnum_classes = 5\n")
    assert cfg.train == {"lam": 0.1, "K": None, "attention": False, "pooling": "gap"}
    assert cfg.synth == {"num_classes": 5}
    tc = cfg.train_config()
    assert tc.lam == 0.1 and tc.codewords == 64


def test_seed_applies_to_both_sections():
    cfg = cli.parse_config("seed = 9\n")
    assert cfg.train_config().seed == 9 and cfg.synth_spec().seed == 9


def test_unknown_key_reports_line():
    with pytest.raises(ConfigError) as err:
        cli.parse_config("K = 4\n\n# note\nlearning_rate = 3\n", "run.cfg")
    assert err.value.line == 4
    assert str(err.value).startswith("run.cfg:4:")


@pytest.mark.parametrize("text", ["K = four\n", "attention = maybe\n", "just words\n"])
def test_malformed_values(text):
    with pytest.raises(ConfigError) as err:
        cli.parse_config(text)
    assert err.value.line == 1


def test_invalid_config_values_are_config_errors():
    with pytest.raises(ConfigError):
        cli.parse_config("lambda = -1\n").train_config()


def test_help_lists_every_flag(capsys):
    with pytest.raises(SystemExit) as ex:
        cli.main(["train", "--help"])
    assert ex.value.code == 0
    out = capsys.readouterr().out
    for flag in ("--config", "--data", "--out", "--pooling", "--attention", "--seed", "--lambda", "--metrics"):
        assert flag in out


def test_unknown_flag_rejected(capsys):
    with pytest.raises(SystemExit) as ex:
        cli.main(["eval", "--ckpt", "x", "--data", "y", "--frobnicate"])
    assert ex.value.code == 2


def test_config_error_exit_code(workdir, capsys):
    (workdir / "bad.cfg").write_text("K = 4\nmomentum = 0.9\n")
    code = cli.main(["train", "--config", str(workdir / "bad.cfg"), "--data", str(workdir / "ds"),
                     "--out", str(workdir / "bad.ckpt")])
    assert code == cli.EXIT_CONFIG
    assert "bad.cfg:2" in capsys.readouterr().err


def test_data_error_exit_code(workdir):
    code = cli.main(["train", "--config", str(workdir / "train.cfg"), "--data", str(workdir / "missing"),
                     "--out", str(workdir / "m.ckpt")])
    assert code == cli.EXIT_DATA
    (workdir / "junk.ckpt").write_bytes(b"nope")
    assert cli.main(["eval", "--ckpt", str(workdir / "junk.ckpt"), "--data", str(workdir / "ds")]) == cli.EXIT_DATA


def test_gradcheck_command(capsys):
    assert cli.main(["gradcheck", "--module", "numerics"]) == 0
    assert "5/5 cases passed" in capsys.readouterr().out
    assert cli.main(["gradcheck", "--module", "numerics", "--tol", "1e-300"]) == cli.EXIT_GRADCHECK


def test_train_eval_separable(workdir, capsys):
    ckpt = workdir / "m.ckpt"
    assert cli.main(["train", "--config", str(workdir / "train.cfg"), "--data", str(workdir / "ds"),
                     "--out", str(ckpt), "--seed", "1"]) == 0
    lines = cli.metrics_path(ckpt).read_text().splitlines()
    assert lines[0] == "epoch,stage,split,loss_cls,loss_att,loss_total,acc"
    assert len(lines) == 1 + 2 * (4 + 8)
    capsys.readouterr()
    assert cli.main(["eval", "--ckpt", str(ckpt), "--data", str(workdir / "ds"),
                     "--metrics", str(workdir / "eval.txt")]) == 0
    out = capsys.readouterr().out
    acc = float(out.split("accuracy")[1].split()[0])
    assert acc >= 0.99
    rec = (workdir / "eval.txt").read_text().splitlines()
    assert rec[0] == lines[0] and rec[1].startswith("8,2,test,")


def test_flags_override_file(workdir):
    ckpt = workdir / "gap.ckpt"
    assert cli.main(["train", "--config", str(workdir / "train.cfg"), "--data", str(workdir / "ds"),
                     "--out", str(ckpt), "--pooling", "gap", "--attention", "off", "--lambda", "0.01"]) == 0
    from attnvlad.model import load_checkpoint

    st = load_checkpoint(ckpt)
    assert st.cfg.pooling == "gap" and st.cfg.attention is False and st.cfg.lam == 0.01 and st.cfg.K == 4


def test_train_is_deterministic(workdir):
    paths = []
    for name in ("r1.ckpt", "r2.ckpt"):
        paths.append(workdir / name)
        assert cli.main(["train", "--config", str(workdir / "train.cfg"), "--data", str(workdir / "ds"),
                         "--out", str(paths[-1]), "--seed", "3"]) == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert cli.metrics_path(paths[0]).read_text() == cli.metrics_path(paths[1]).read_text()


def test_export_attention(workdir, capsys):
    ckpt = workdir / "m.ckpt"
    if not ckpt.exists():
        cli.main(["train", "--config", str(workdir / "train.cfg"), "--data", str(workdir / "ds"), "--out", str(ckpt)])
    capsys.readouterr()
    assert cli.main(["export-attention", "--ckpt", str(ckpt), "--data", str(workdir / "ds"),
                     "--out", str(workdir / "heat"), "--per-class", "--limit", "2"]) == 0
    names = sorted(p.name for p in (workdir / "heat").iterdir())
    assert names == [f"test_0000{i}_att_{c}.pgm" for i in range(2) for c in range(3)]
    assert "attention_quality mean=" in capsys.readouterr().out


def test_ablate_table(workdir, capsys):
    out = workdir / "ablate.txt"
    assert cli.main(["ablate", "--config", str(workdir / "train.cfg"), "--data", str(workdir / "ds"),
                     "--lambdas", "1e-4,0.4,1", "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "lambda,epoch,stage,split,loss_cls,loss_att,loss_total,acc"
    assert [r.split(",")[0] for r in rows[1:]] == ["0.0001", "0.4", "1"]
    assert cli.main(["ablate", "--data", str(workdir / "ds"), "--lambdas", "a,b"]) == cli.EXIT_CONFIG


def test_shipped_configs_match_experiment_constants():
    from pathlib import Path

    from attnvlad import experiments as ex
    from attnvlad.model import TrainConfig

    root = Path(__file__).resolve().parents[1] / "configs"
    assert cli.load_config(root / "synth_features.cfg").synth_spec() == ex.ABLATION_SPEC
    assert cli.load_config(root / "desk.cfg").train_config() == ex.DESK_TRAIN
    assert cli.load_config(root / "full_recipe.cfg").train_config() == TrainConfig(K=64)
    assert cli.load_config(root / "synth_image.cfg").synth_spec().variant == "image"
