import json

import pytest

from celd.cli import main
from celd.config import ConfigError, load_config
from celd.evaluator import EvalReport
from celd.perturb import KINDS

TINY = """
[data]
seed = 0
[data.synth]
side = 64
n_per_class = [10, 10, 10]
seed = 3
[model]
growth_rate = 4
block_layout = [1, 1]
[train]
learning_rate = 1e-2
max_epochs = 2
early_stop_patience = 2
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text(TINY)
    return path


def run(config, out, *args):
    return main([args[0], "--config", str(config), "--out", str(out), *args[1:]])


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    config = tmp / "exp.toml"
    config.write_text(TINY)
    out = tmp / "run"
    assert run(config, out, "run-all", "--deterministic") == 0
    return config, out


def test_run_all_layout(finished_run):
    _, out = finished_run
    for stage in ("source", "target"):
        assert (out / "checkpoints" / f"{stage}.pt").is_file()
        assert (out / "checkpoints" / f"{stage}.json").is_file()
        assert (out / "logs" / f"history_{stage}.csv").read_text().startswith("epoch,train_loss,val_loss,val_acc")
    assert (out / "reports" / "metrics.csv").is_file()
    assert sorted(p.stem for p in (out / "reports").glob("cm_*.png")) == sorted(f"cm_{k}" for k in KINDS)
    meta = json.loads((out / "checkpoints" / "target.json").read_text())
    assert meta["labelspace"] == ["Healthy", "DR", "Glaucoma"]


def test_identical_reruns(finished_run, tmp_path):
    config, out = finished_run
    again = tmp_path / "again"
    assert run(config, again, "run-all", "--deterministic") == 0
    assert (again / "reports" / "metrics.csv").read_text() == (out / "reports" / "metrics.csv").read_text()


def test_refuses_to_overwrite(finished_run, capsys):
    config, out = finished_run
    assert run(config, out, "synth") == 2
    assert "--force" in capsys.readouterr().err
    assert run(config, out, "run-all") == 2


def test_eval_perturb_flag(finished_run, tmp_path):
    import shutil

    config, out = finished_run
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    assert run(config, copy, "eval", "--perturb", "RG:alpha=0.2") == 0
    rep = EvalReport.load(copy / "reports" / "eval" / "RG_alpha-0.2.json")
    assert rep.perturbation.kind == "RG" and rep.perturbation.params == {"alpha": 0.2}
    assert run(config, copy, "report", "--force") == 0
    assert (copy / "reports" / "cm_RG_2.png").is_file()


def test_extend_without_source(config, tmp_path, capsys):
    assert run(config, tmp_path / "r", "extend") == 3
    assert "train-source" in capsys.readouterr().err


def test_stepwise_prerequisites(config, tmp_path, capsys):
    out = tmp_path / "r"
    assert run(config, out, "split") == 3
    assert "celd pool" in capsys.readouterr().err
    assert run(config, out, "pool") == 3
    assert "celd synth" in capsys.readouterr().err
    for cmd in ("synth", "pool", "split", "train-source", "extend", "eval", "report"):
        assert run(config, out, cmd) == 0, cmd


def test_config_errors(config, tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[data]\nratios = [0.5, 0.5, 0.5]\n[data.synth]\nside = 64\n")
    assert run(bad, tmp_path / "r", "synth") == 2
    bad.write_text("[model]\ngrowth_rate = 4\n")
    with pytest.raises(ConfigError, match="manifests"):
        load_config(bad)
    assert run(tmp_path / "missing.toml", tmp_path / "r", "synth") == 2
    assert main(["eval", "--config", str(config), "--out", str(tmp_path / "r"), "--perturb", "XX"]) == 2


def test_seed_override(config):
    cfg = load_config(config).with_seed(9)
    assert cfg.data.seed == cfg.data.synth.seed == cfg.model.init_seed == cfg.train_source.seed == 9
    assert all(p.seed == 9 for p in cfg.perturb)


def test_config_sections(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text(TINY + '\n[train.target]\nlearning_rate = 5e-3\n[[perturb]]\nkind = "ODC"\nradius = 4\n')
    cfg = load_config(path)
    assert cfg.train_source.learning_rate == 1e-2 and cfg.train_target.learning_rate == 5e-3
    assert cfg.model.input_side == 64
    assert [p.label() for p in cfg.perturb] == ["ODC:radius=4.0"]


def test_shipped_configs_parse():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    desk = load_config(root / "synth_desk.toml")
    assert desk.data.synth.n_per_class == (300, 150, 60)
    full = load_config(root / "pooled_fundus.toml")
    assert full.model.block_layout == (6, 12, 24, 16) and full.train_source.learning_rate == 1e-5
