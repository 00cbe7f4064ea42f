import json
import subprocess
import sys

import numpy as np
import pytest

from smoothcert import __version__
from smoothcert.cli import main
from smoothcert.config import ConfigError, config_hash, get_path, resolve

SMALL = {
    "data": {"classes": 3, "per_class": 15},
    "model": {"widths": [4, 8], "hidden": 16},
    "train": {"epochs": 2, "batch_size": 16, "regime": "adversarial", "epsilon": 0.25, "attack_steps": 2},
    "attack": {"steps": 3, "epsilon": 0.25},
    "smoothing": {"n0": 20, "n": 100, "mc_batch": 50, "radii": [0.0, 0.1, 0.2], "noise_levels": [0.0, 0.5]},
    "adapt": {"batch_size": 9},
    "corruption": {"kinds": ["gaussian_noise", "contrast"]},
}


def write_config(path, **extra):
    cfg = json.loads(json.dumps(SMALL))
    cfg.update(extra)
    path.write_text(json.dumps(cfg))
    return path


def run(*argv):
    return main([str(a) for a in argv])


def pipeline(root):
    cfg = write_config(root / "cfg.json")
    common = ["--config", cfg, "--out", root / "run", "--seed", 3]
    assert run("gen-data", *common) == 0
    assert run("train", *common) == 0
    assert run("certify", *common, "--rho", 1.0) == 0
    return root / "run"


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    return pipeline(tmp_path_factory.mktemp("pipe"))


# ---------------------------------------------------------------- config


def test_defaults_resolve_and_hash_stable():
    a, b = resolve(), resolve()
    assert a == b and config_hash(a) == config_hash(b)
    assert len(config_hash(a)) == 64
    assert config_hash(resolve(out="elsewhere")) == config_hash(a)


def test_dotted_overrides():
    cfg = resolve(overrides=["adapt.rho=0.3", "train.regime=gaussian", "model.widths=[2,3]"])
    assert get_path(cfg, "adapt.rho") == 0.3
    assert cfg["train"]["regime"] == "gaussian" and cfg["model"]["widths"] == [2, 3]
    assert config_hash(cfg) != config_hash(resolve())


@pytest.mark.parametrize("bad", [["adapt.momentum=1"], ["adapt=1"], ["adapt.rho=1.5"], ["rho"],
                                 ["smoothing.alpha=0"]])
def test_bad_overrides_rejected(bad):
    with pytest.raises(ConfigError):
        resolve(overrides=bad)


def test_unknown_key_in_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"adapt": {"rh0": 1.0}}))
    with pytest.raises(ConfigError, match="adapt.rh0"):
        resolve(p)


# ---------------------------------------------------------------- exit codes


def test_config_error_exit_code_and_error_json(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"bogus": 1}))
    code = run("gen-data", "--config", p, "--out", tmp_path / "o")
    assert code == 2
    doc = json.loads((tmp_path / "o" / "error.json").read_text())
    assert doc["status"] == "error" and doc["error"] == "config" and doc["exit_code"] == 2
    assert json.loads(capsys.readouterr().err) == doc


def test_missing_checkpoint_exit_code(tmp_path):
    code = run("eval-noise", "--out", tmp_path, "--set", "model.checkpoint=\"nope.rten\"")
    assert code == 3
    assert json.loads((tmp_path / "error.json").read_text())["error"] == "missing_input"


def test_corrupt_eval_needs_reference(trained):
    assert run("corrupt-eval", "--config", trained.parent / "cfg.json", "--out", trained, "--seed", 3) == 2


# ---------------------------------------------------------------- pipeline


def test_pipeline_outputs(trained):
    for name in ("dataset.rten", "dataset.rten.json", "model.rten", "model.rten.json", "model_last.rten",
                 "train.json", "train.csv", "train.config.json", "certify.jsonl", "certify.csv",
                 "certify.json", "certify.config.json"):
        assert (trained / name).exists(), name
    rep = json.loads((trained / "certify.json").read_text())
    cfg = json.loads((trained / "certify.config.json").read_text())
    assert rep["version"] == __version__ and rep["config_hash"] == config_hash(cfg)
    acc = rep["results"]["certified_accuracy"]
    assert all(a >= b for a, b in zip(acc, acc[1:]))
    lines = (trained / "certify.jsonl").read_text().splitlines()
    assert len(lines) == rep["results"]["examples"] == 9
    assert {"index", "decision", "radius", "label", "p_a_lower"} <= set(json.loads(lines[0]))


def test_reports_byte_identical_across_runs(tmp_path, trained):
    again = pipeline(tmp_path)
    for name in ("train.json", "train.csv", "certify.json", "certify.csv", "certify.jsonl", "dataset.rten",
                 "model.rten"):
        assert (again / name).read_bytes() == (trained / name).read_bytes(), name


def test_attack_eot_m1_matches_plain(trained):
    common = ["--config", trained.parent / "cfg.json", "--out", trained, "--seed", 3]
    assert run("attack", *common) == 0
    plain = json.loads((trained / "attack.json").read_text())["results"]
    assert run("attack", *common, "--eot-m", 1) == 0
    eot = json.loads((trained / "attack.json").read_text())["results"]
    assert eot["eot_m"] == 1
    assert eot["robust_acc"] == plain["robust_acc"]


def test_eval_noise_grad_map_and_corrupt_eval(trained):
    common = ["--config", trained.parent / "cfg.json", "--out", trained, "--seed", 3]
    assert run("eval-noise", *common, "--rho", 1.0) == 0
    levels = json.loads((trained / "eval-noise.json").read_text())["results"]["levels"]
    assert [lv["sigma"] for lv in levels] == [0.0, 0.5]
    assert all(lv["acc_adapted"] is not None for lv in levels)

    assert run("grad-map", *common, "--count", 3) == 0
    pgm = (trained / "grad_000.pgm").read_bytes()
    assert pgm.startswith(b"P5\n16 16\n255\n") and len(pgm) == len(b"P5\n16 16\n255\n") + 256

    assert run("corrupt-eval", *common, "--set", "corruption.write_reference=true") == 0
    res = json.loads((trained / "corrupt-eval.json").read_text())["results"]
    assert res["no_adapt"]["mce"] == pytest.approx(100.0)
    assert (trained / "reference_table.json").exists()


def test_sweep_over_rho(trained):
    common = ["--config", trained.parent / "cfg.json", "--out", trained, "--seed", 3]
    code = run("sweep", *common, "--param", "adapt.rho", "--values", "0,0.5,1.0")
    assert code == 0
    res = json.loads((trained / "sweep.json").read_text())["results"]
    assert [r["value"] for r in res["runs"]] == [0, 0.5, 1.0]
    assert res["command"] == "eval-noise"
    rows = (trained / "sweep.csv").read_text().splitlines()
    assert rows[0].startswith("adapt.rho,") and len(rows) == 4
    assert run("sweep", *common, "--param", "adapt.rho", "--values", "2") == 2


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "smoothcert.cli", "gen-data", "--out", str(tmp_path),
                           "--set", "data.per_class=4", "--set", "data.classes=2"],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    status = json.loads(proc.stdout)
    assert status["status"] == "ok" and status["command"] == "gen-data"
    ds = json.loads((tmp_path / "dataset.rten.json").read_text())
    assert ds["k"] == 2 and ds["n"] == 4
    assert np.isclose(sum(ds["split_sizes"].values()), 8)
