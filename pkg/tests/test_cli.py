import json

import numpy as np
import pytest

from isoneural import CASES_DIR, case_path
from isoneural.cli import main
from isoneural.config import ConfigError, build_case, load_run_config

CONFIGS = sorted(p.name for p in CASES_DIR.glob("*.yaml"))


def write_config(tmp_path, text):
    p = tmp_path / "run.yaml"
    p.write_text(text.replace("GEOM", str(case_path("lshape.json"))), encoding="utf-8")
    return p


SMALL = """
geometry: GEOM
problem: {type: poisson_manufactured, case: sine_product}
networks: {interior: {width: 4, hidden_layers: 1}}
training: {epochs: 3, samples_per_epoch: 200, eval_every: 1}
evaluation: {n_points: 300}
"""


def test_shipped_configs_exist():
    assert {"poisson_lshape.yaml", "quadrupole.yaml", "holder.yaml", "contact_square.yaml"} <= set(CONFIGS)


@pytest.mark.parametrize("name", CONFIGS)
def test_shipped_configs_build(name):
    case = build_case(load_run_config(case_path(name)))
    assert case.ansatz.n_params > 0


def test_check_geometry(capsys):
    assert main(["check-geometry", "--geometry", str(case_path("lshape.json"))]) == 0
    out = capsys.readouterr().out
    assert "J(1) = {(1, 2), (1, 2, 3)}" in out
    assert "conformity: passed" in out


def test_describe_ansatz(capsys):
    assert main(["describe-ansatz", "--config", str(case_path("holder.yaml"))]) == 0
    assert "networks: 12   trainable parameters: 14676" in capsys.readouterr().out


def test_train_evaluate_export(tmp_path, capsys):
    cfg = write_config(tmp_path, SMALL)
    ck = tmp_path / "ck"
    assert main(["train", "--config", str(cfg), "--checkpoint", str(ck)]) == 0
    out = capsys.readouterr().out
    assert "epochs 1..3" in out and "relative L2 error at epoch 3" in out
    assert main(["train", "--config", str(cfg), "--checkpoint", str(ck), "--resume", "--epochs", "2"]) == 0
    assert "epochs 1..5" in capsys.readouterr().out
    assert json.loads((ck / "state.json").read_text())["epoch"] == 5
    assert main(["evaluate", "--config", str(cfg), "--checkpoint", str(ck)]) == 0
    out = capsys.readouterr().out
    assert "patch 3" in out and "final training loss" in out
    assert main(["export-field", "--config", str(cfg), "--checkpoint", str(ck), "--resolution", "3",
                 "--out", str(tmp_path / "fields")]) == 0
    assert sorted(p.name for p in (tmp_path / "fields").iterdir()) == [
        "manifest.json", "patch_1.csv", "patch_2.csv", "patch_3.csv"]


def test_contact_evaluate_reports_penetration(tmp_path, capsys):
    ck = tmp_path / "ck"
    cfg = case_path("contact_square.yaml")
    assert main(["train", "--config", str(cfg), "--checkpoint", str(ck), "--epochs", "2"]) == 0
    assert main(["evaluate", "--config", str(cfg), "--checkpoint", str(ck), "--phi", "-1"]) == 0
    assert "max penetration depth" in capsys.readouterr().out


def test_seed_override_changes_parameters(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    for seed in (1, 2):
        main(["train", "--config", str(cfg), "--checkpoint", str(tmp_path / f"s{seed}"), "--seed", str(seed)])
    a, b = ((tmp_path / f"s{s}" / "params.f64").read_bytes() for s in (1, 2))
    assert a != b


@pytest.mark.parametrize("argv", [
    ["evaluate", "--config", "missing.yaml", "--checkpoint", "nowhere"],
    ["train", "--config", "CFG", "--resume"],
    ["export-field", "--config", "CFG", "--phi", "0", "--out", "OUT"],
])
def test_errors_exit_one(tmp_path, capsys, argv):
    cfg = write_config(tmp_path, SMALL)
    argv = [str(cfg) if a == "CFG" else str(tmp_path / "o") if a == "OUT" else a for a in argv]
    assert main(argv) == 1
    assert capsys.readouterr().err.startswith("error:")


@pytest.mark.parametrize("text,match", [
    ("geometry: GEOM\nproblem: {type: poisson_manufactured}\nbogus: 1\n", "unknown keys"),
    ("problem: {type: poisson_manufactured}\n", "missing 'geometry'"),
    ("geometry: GEOM\nproblem: {type: poisson_manufactured}\ntraining: {epochz: 3}\n", "unknown keys"),
    ("[1, 2]\n", "mapping"),
])
def test_config_errors(tmp_path, text, match):
    with pytest.raises(ConfigError, match=match):
        load_run_config(write_config(tmp_path, text))


def test_thread_env(monkeypatch, capsys):
    import torch

    before = torch.get_num_threads()
    monkeypatch.setenv("ISONEURAL_NUM_THREADS", "1")
    assert main(["check-geometry", "--geometry", str(case_path("contact_square.json"))]) == 0
    assert torch.get_num_threads() == 1
    torch.set_num_threads(before)


def test_overrides():
    cfg = load_run_config(case_path("poisson_lshape.yaml")).with_overrides(seed=7, epochs=3)
    assert (cfg.training.seed, cfg.training.epochs) == (7, 3)
    assert np.isclose(cfg.training.optimizer.lr, load_run_config(case_path("poisson_lshape.yaml")).training.optimizer.lr)
