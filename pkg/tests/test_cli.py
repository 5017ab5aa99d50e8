import json
import os

import numpy as np
import pytest
import yaml

from ecl import cli, pipeline
from ecl.config import ConfigError, ExperimentConfig, resolve
from ecl.losses import adaptive_lambda

SMOKE = {
    "task": {"n_per_domain": 100},
    "model": {"hidden": 16},
    "training": {"epochs": 5, "aux_epochs": 5, "calib_epochs": 5, "finetune_epochs": 2,
                 "arms": ["uncal", "soft-ece", "ecl", "uncal-matched"]},
    "loss": {"lattice_resolution": 6},
    "ablation": {"n_seeds": 2},
    "verify": {"ns": [100, 1000, 10000], "trials": 10, "n_random": 100, "large_n": 20000},
}


@pytest.fixture
def smoke_cfg(tmp_path):
    path = tmp_path / "smoke.yaml"
    path.write_text(yaml.safe_dump(SMOKE))
    return str(path)


def _run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


# ---------------------------------------------------------------- config

def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig.from_dict(SMOKE)
    cfg.save(tmp_path / "c.yaml")
    again = ExperimentConfig.load(tmp_path / "c.yaml")
    assert again.to_dict() == cfg.to_dict()


@pytest.mark.parametrize("bad", [
    {"trainig": {}},
    {"training": {"epoch": 3}},
    {"training": {"epochs": 0}},
    {"loss": {"paradigms": ["bogus"]}},
    {"loss": {"posterior": "frozen"}},
    {"training": {"arms": ["soft-ece"]}},
    {"task": {"kind": "laplace"}},
])
def test_invalid_configs(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)


def test_out_dir_precedence(tmp_path, monkeypatch):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"output": {"dir": "from-file"}}))
    assert resolve(str(p)).output.dir == "from-file"
    monkeypatch.setenv("ECL_OUT_DIR", "from-env")
    assert resolve(str(p)).output.dir == "from-env"
    assert resolve(str(p), out="from-flag").output.dir == "from-flag"
    assert resolve(str(p), seed=9).training.seed == 9


# ---------------------------------------------------------------- exit codes

def test_invalid_config_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("training:\n  epoch: 3\n")
    code, _, err = _run(["--config", str(p), "train"], capsys)
    assert code == 2 and "epoch" in err


def test_unknown_verify_id_exit_code(tmp_path, capsys):
    code, _, _ = _run(["--out", str(tmp_path), "verify", "theorem9"], capsys)
    assert code == 2


def test_bad_arguments_exit_code():
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--seed", "abc"])
    assert exc.value.code == 2


def test_divergence_exit_code(tmp_path, smoke_cfg, capsys):
    cfg = yaml.safe_load(open(smoke_cfg))
    cfg["training"]["lr"] = 1e308  # the first Adam steps overflow the logits
    p = tmp_path / "div.yaml"
    p.write_text(yaml.safe_dump(cfg))
    code, _, err = _run(["--config", str(p), "--out", str(tmp_path / "o"), "train"], capsys)
    assert code == 3 and "diverged" in err


# ---------------------------------------------------------------- train

def test_smoke_train_writes_declared_outputs(tmp_path, smoke_cfg, capsys):
    import time
    out = tmp_path / "run"
    t0 = time.perf_counter()
    code, stdout, _ = _run(["--config", smoke_cfg, "--out", str(out), "train"], capsys)
    assert code == 0 and time.perf_counter() - t0 < 30
    cfg = resolve(smoke_cfg, out=str(out))
    manifest = json.loads((out / "manifest.json").read_text())["files"]
    assert manifest == pipeline.declared_outputs(cfg)
    assert all((out / f).exists() for f in manifest)
    arms = {r["arm"] for r in json.loads(stdout)}
    assert arms == {"uncal", "soft-ece", "uncal-matched", "ecl-canonical", "ecl-top-label", "ecl-class-wise"}
    rep = json.loads((out / "seed_0" / "reports" / "ecl-top-label.json").read_text())
    assert rep["schema_version"] == 1 and rep["seed"] == 0 and "lambda_trace" in rep["extra"]

    # lambda trace replays from the logged losses
    curve = pipeline.read_curve(out / "seed_0" / "curves" / "ecl-top-label.csv")
    replay = pipeline.replay_lambda(curve, gamma=cfg.loss.gamma, cap=cfg.loss.lambda_cap)
    assert np.allclose(replay, rep["extra"]["lambda_trace"], rtol=1e-12)
    assert np.allclose(replay, [row[3] for row in curve], rtol=1e-12)
    ce = sum(r[1] for r in curve)
    ecl = sum(r[2] for r in curve)
    assert replay[-1] == pytest.approx(adaptive_lambda(ce, ecl, cfg.loss.gamma, cfg.loss.lambda_cap))

    # identical configs give identical reports
    first = {arm: (out / "seed_0" / "reports" / f"{arm}.json").read_bytes() for arm in arms}
    assert _run(["--config", smoke_cfg, "--out", str(out), "train"], capsys)[0] == 0
    for arm in arms:
        assert (out / "seed_0" / "reports" / f"{arm}.json").read_bytes() == first[arm]

    # checkpoint save -> load -> save is byte identical
    from ecl.model import load_checkpoint, save_checkpoint
    ck = out / "seed_0" / "checkpoints" / "ecl-canonical.json"
    params, echo, ledger = load_checkpoint(ck)
    save_checkpoint(tmp_path / "again.json", params, echo, ledger)
    assert ck.read_bytes() == (tmp_path / "again.json").read_bytes()

    # report re-renders the same metrics from the checkpoint
    code, stdout, _ = _run(["--out", str(tmp_path / "rep"), "report", str(out / "seed_0" / "checkpoints" / "uncal.json")],
                           capsys)
    assert code == 0
    again = json.loads(stdout)
    orig = json.loads((out / "seed_0" / "reports" / "uncal.json").read_text())
    assert again["ece"] == orig["ece"] and again["accuracy"] == orig["accuracy"]


def test_global_flags_after_subcommand(tmp_path, smoke_cfg, capsys):
    code, _, _ = _run(["simulate", "--config", smoke_cfg, "--seed", "4", "--out", str(tmp_path / "s")], capsys)
    assert code == 0
    lines = (tmp_path / "s" / "source.csv").read_text().splitlines()
    assert lines[0] == "x1,x2,y,posterior0,posterior1" and len(lines) == 101


def test_env_out_dir(tmp_path, smoke_cfg, capsys, monkeypatch):
    monkeypatch.setenv("ECL_OUT_DIR", str(tmp_path / "env"))
    assert _run(["--config", smoke_cfg, "simulate"], capsys)[0] == 0
    assert (tmp_path / "env" / "target.csv").exists()


# ---------------------------------------------------------------- ablation and verification

@pytest.mark.parametrize("which, arms", [
    ("gamma-sweep", ["gamma=0.5", "gamma=0.8", "gamma=1.0", "gamma=1.2", "gamma=1.5"]),
    ("minibatch", ["trainable", "naive"]),
])
def test_ablation_arms_share_initialisation(tmp_path, smoke_cfg, capsys, which, arms):
    code, stdout, _ = _run(["--config", smoke_cfg, "--out", str(tmp_path), "ablate", which], capsys)
    assert code == 0
    assert [r["arm"] for r in json.loads(stdout)] == arms
    doc = json.loads((tmp_path / f"ablation_{which}.json").read_text())
    assert doc["matched_initialisation"]
    assert all(r["n_seeds"] == 2 for r in doc["rows"])
    assert "±" in (tmp_path / f"ablation_{which}.csv").read_text(encoding="utf-8")


def test_unknown_ablation(tmp_path, capsys):
    assert _run(["--out", str(tmp_path), "ablate", "dropout"], capsys)[0] == 2


def test_verify_all(tmp_path, smoke_cfg, capsys):
    code, stdout, _ = _run(["--config", smoke_cfg, "--out", str(tmp_path), "--seed", "0", "verify", "all"], capsys)
    assert code == 0
    res = json.loads(stdout)
    assert set(res) == {"theorem1", "theorem2", "theorem3"}
    t1 = json.loads((tmp_path / "theorem1.json").read_text())
    assert t1["seed"] == 0 and t1["config"]["verify"]["trials"] == 10
    verdicts = {r["instance"]: r for r in t1["reports"]}
    assert verdicts["symmetric posterior, canonical level sets"]["passed"]
    assert not verdicts["logistic posterior, canonical level sets"]["passed"]
    t3 = json.loads((tmp_path / "theorem3.json").read_text())
    assert t3["reports"][0]["passed"]
    assert (tmp_path / "theorem2_sweep.csv").exists()
