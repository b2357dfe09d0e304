import json

import pandas as pd
import pytest

from main import EXIT_CHECKS_FAILED, main

MICRO_MODEL = {"n_layers": 2, "d_model": 16, "n_heads": 2, "d_ff": 32, "max_context": 32}


@pytest.fixture(autouse=True)
def _isolated_cwd(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)


def _write(path, payload):
    path.write_text(json.dumps(payload), encoding="utf-8")
    return str(path)


def _last_json(capsys):
    lines = [line for line in capsys.readouterr().out.splitlines() if line.strip()]
    return json.loads(lines[-1])


def test_bad_config_exits_3(tmp_path, capsys):
    config = _write(tmp_path / "bad.json", {"data": {"n_entities": 10, "colour": "red"}})
    assert main(["gen-data", "--config", config, "--run-dir", str(tmp_path / "run")]) == 3
    response = _last_json(capsys)
    assert response["code"] == "config_invalid"
    assert response["details"]["errors"][0]["loc"] == "data.colour"


def test_missing_config_file_exits_3(tmp_path):
    assert main(["gen-data", "--config", str(tmp_path / "absent.json"), "--run-dir", str(tmp_path)]) == 3


def test_probe_on_missing_activations_exits_2(tmp_path, capsys):
    config = _write(tmp_path / "probe.json", {"checkpoint": "D2"})
    assert main(["probe", "--config", config, "--run-dir", str(tmp_path / "run")]) == 2
    assert _last_json(capsys)["code"] == "missing_artifact"


def test_report_without_run_exits_2(tmp_path):
    assert main(["report", "--run-dir", str(tmp_path / "nothing")]) == 2


def test_stepwise_pipeline(tmp_path, capsys):
    run = str(tmp_path / "run")
    gen = _write(tmp_path / "gen.json", {"data": {"n_entities": 36, "m": 3, "seed": 4}})
    train = _write(tmp_path / "train.json", {"model": MICRO_MODEL, "train": {"epochs": 1, "batch_size": 16}})
    capture = _write(tmp_path / "capture.json", {"checkpoint": "D3"})
    probe = _write(tmp_path / "probe.json", {"checkpoint": "D3", "stages": [1, 3], "pairwise": True,
                                             "probe": {"n_splits": 2, "max_iter": 200}})
    geometry = _write(tmp_path / "geometry.json", {"checkpoints": ["D3"]})

    assert main(["gen-data", "--config", gen, "--run-dir", run]) == 0
    assert (tmp_path / "run" / "gen-data.config.json").exists()
    assert main(["train", "--config", train, "--run-dir", run]) == 0
    losses = json.loads((tmp_path / "run" / "reports" / "train_losses.json").read_text())
    assert set(losses) == {"D1", "D2", "D3"}
    assert main(["capture", "--config", capture, "--run-dir", run]) == 0
    assert (tmp_path / "run" / "acts" / "D3" / "1.actv").exists()

    capsys.readouterr()
    assert main(["probe", "--config", probe, "--run-dir", run]) == 0
    summary = _last_json(capsys)
    assert summary["label_def"] == "D1-vs-D3"
    assert 0.0 <= summary["best_acc"] <= 1.0
    assert (tmp_path / "run" / "reports" / "pairwise_D3_1.csv").exists()

    assert main(["geometry", "--config", geometry, "--run-dir", run]) == 0
    frame = pd.read_csv(tmp_path / "run" / "reports" / "geometry.csv")
    assert frame["tau"].between(-1.0, 1.0).all()


def test_train_rejects_a_short_context(tmp_path, capsys):
    run = str(tmp_path / "run")
    gen = _write(tmp_path / "gen.json", {"data": {"n_entities": 12, "m": 2}})
    train = _write(tmp_path / "train.json", {"model": dict(MICRO_MODEL, max_context=6)})
    assert main(["gen-data", "--config", gen, "--run-dir", run]) == 0
    assert main(["train", "--config", train, "--run-dir", run]) == 3
    assert _last_json(capsys)["details"]["max_context"] == 6


def test_seed_flag_overrides_every_seed(tmp_path):
    gen = _write(tmp_path / "gen.json", {"data": {"n_entities": 12, "m": 2, "seed": 1}})
    assert main(["gen-data", "--config", gen, "--run-dir", str(tmp_path / "run"), "--seed", "9"]) == 0
    archived = json.loads((tmp_path / "run" / "gen-data.config.json").read_text())
    assert archived["data"]["seed"] == 9


def test_experiment_then_report(tmp_path, capsys):
    config = _write(tmp_path / "tiny.json", {
        "name": "tiny",
        "variant": "two_stage",
        "data": {"n_entities": 36, "m": 2, "seed": 3},
        "model": MICRO_MODEL,
        "train": {"epochs": 1, "batch_size": 16},
        "probe": {"n_splits": 2, "max_iter": 200},
    })
    run = str(tmp_path / "tiny")
    assert main(["experiment", "--config", config, "--run-dir", run]) == 0
    assert _last_json(capsys)["scalars"] > 0
    assert main(["report", "--run-dir", run]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_failed_oracle_check_sets_exit_code(tmp_path, monkeypatch):
    from recency_lab.models.reports import CheckResult
    from recency_lab.services import oracle

    monkeypatch.setattr(oracle, "verify_pipeline",
                        lambda specs, seed, out_dir=None: [CheckResult(spec="s", check="c", passed=False)])
    assert main(["oracle-verify", "--run-dir", str(tmp_path / "o")]) == EXIT_CHECKS_FAILED
    assert (tmp_path / "o" / "reports" / "oracle.csv").exists()
