import json

import pytest

from robustfuse import cli
from robustfuse.experiments import merge_reports
from robustfuse.io import SCHEMA_VERSION, read_json

TINY = {
    "experiment": {
        "scene": {"size": 12},
        "n_train": 8, "n_val": 4, "n_test": 4,
        "arch": {"slots": ["3-DC"] * 6, "rule": {"kind": "AA"}, "base_channels": 2},
        "seg_width": 2,
        "aat": {"joint_steps": 2, "inner_steps": 1, "outer_steps": 1, "warm_steps": 1, "joint_attack_steps": 1,
                "level_steps": 1},
        "source_steps": 2, "source_base_channels": 2, "attack_samples": 8,
        "eval_budgets": [["4/255", 1]],
    },
    "search": {"warm_start_steps": 1, "iterations": 1, "param_steps_per_alpha_step": 1, "attack_steps": 1,
               "base_channels": 2, "seg_width": 2},
    "sweep": {"ops": ["3-C", "3-DC"], "rules": ["AA", "MAX"]},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def run(tmp_path, config, *argv, sub="out"):
    return cli.main(["--config", config, "--out", str(tmp_path / sub), *argv])


def test_gen_data_is_deterministic(tmp_path, config):
    assert run(tmp_path, config, "gen-data", "--n", "6", sub="a") == 0
    assert run(tmp_path, config, "gen-data", "--n", "6", sub="b") == 0
    ha = read_json(tmp_path / "a" / "gen-data_manifest.json")["metrics"]["dataset_hash"]
    hb = read_json(tmp_path / "b" / "gen-data_manifest.json")["metrics"]["dataset_hash"]
    assert ha == hb
    assert (tmp_path / "a" / "dataset.bin").read_bytes() == (tmp_path / "b" / "dataset.bin").read_bytes()
    assert run(tmp_path, config, "--seed", "3", "gen-data", "--n", "6", sub="c") == 0
    assert read_json(tmp_path / "c" / "gen-data_manifest.json")["metrics"]["dataset_hash"] != ha


def test_manifest_fields(tmp_path, config):
    run(tmp_path, config, "gen-data", "--n", "4")
    m = read_json(tmp_path / "out" / "gen-data_manifest.json")
    assert m["schema_version"] == SCHEMA_VERSION
    assert {"code_version", "config", "metrics", "timestamps", "extra"} <= set(m)
    assert read_json(tmp_path / "out" / "gen-data_manifest_metrics.json") == m["metrics"]


def test_grad_check_passes(tmp_path, config, capsys):
    assert run(tmp_path, config, "grad-check", "--seeds", "1", "--coords", "4") == 0
    assert "FAIL" not in capsys.readouterr().out


@pytest.mark.parametrize("argv", [["--bogus"], ["frobnicate"], ["train"], ["eval", "--steps", "x"], []])
def test_usage_errors_exit_1(tmp_path, argv):
    assert cli.main(["--out", str(tmp_path), *argv]) == 1


def test_bad_config_exits_1(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"experiment": {"n_trian": 3}}))
    assert cli.main(["--config", str(bad), "--out", str(tmp_path), "gen-data"]) == 1
    bad.write_text(json.dumps({"extras": {}}))
    assert cli.main(["--config", str(bad), "--out", str(tmp_path), "gen-data"]) == 1
    assert cli.main(["--config", str(tmp_path / "missing.json"), "--out", str(tmp_path), "gen-data"]) == 1


def test_unknown_strategy_and_missing_checkpoint(tmp_path, config):
    assert run(tmp_path, config, "train", "--strategy", "magic") == 1
    assert run(tmp_path, config, "eval", "--checkpoint", str(tmp_path / "none.ckpt")) == 1


def test_divergence_exits_2(tmp_path, config, monkeypatch):
    from robustfuse.training import TrainingDiverged

    def boom(*a, **k):
        raise TrainingDiverged("loss became nan", {})

    monkeypatch.setattr(cli, "train_strategy", boom)
    assert run(tmp_path, config, "train", "--strategy", "SAT") == 2


def test_train_eval_report_replay(tmp_path, config, capsys):
    assert run(tmp_path, config, "train", "--strategy", "sat") == 0
    out = tmp_path / "out"
    assert (out / "model.ckpt").exists() and (out / "run_sat" / "sat_run.json").exists()
    assert run(tmp_path, config, "eval", "--eps", "4/255", "--steps", "2") == 0
    metrics = read_json(out / "metrics.json")
    assert {"clean", "attacked"} <= set(metrics)
    assert metrics["attacked"]["epsilon"] == pytest.approx(4 / 255) and metrics["attacked"]["steps"] == 2
    assert run(tmp_path, config, "eval", "--eps", "0", sub="out") == 0
    zero = read_json(out / "metrics.json")
    assert zero["attacked"]["miou"] == zero["clean"]["miou"] and zero["attacked"]["loss"] == zero["clean"]["loss"]
    for name in ("train", "eval"):
        same, old, new = cli.replay(out / f"{name}_manifest.json", tmp_path / f"replay_{name}")
        assert same, (old, new)
    assert cli.main(["replay", str(out / "eval_manifest.json")]) == 0
    assert run(tmp_path, config, "report", str(out / "eval_manifest.json"), sub="rep") == 0
    text = (tmp_path / "rep" / "report.csv").read_text().splitlines()
    assert text[0].startswith("schema_version,kind,variant,epsilon,steps,seed") and len(text) == 3


def test_replay_detects_tampering(tmp_path, config):
    run(tmp_path, config, "gen-data", "--n", "4")
    path = tmp_path / "out" / "gen-data_manifest.json"
    m = read_json(path)
    m["metrics"]["dataset_hash"] = "0" * 64
    path.write_text(json.dumps(m))
    assert cli.main(["replay", str(path)]) == 1


def test_report_rejects_schema_mismatch(tmp_path, config):
    run(tmp_path, config, "gen-data", "--n", "4")
    path = tmp_path / "out" / "gen-data_manifest.json"
    m = read_json(path)
    m["schema_version"] = SCHEMA_VERSION + 1
    path.write_text(json.dumps(m))
    with pytest.raises(ValueError):
        merge_reports([path])
    assert run(tmp_path, config, "report", str(path), sub="rep") == 1


def test_sweep_rows_and_checks(tmp_path, config):
    assert run(tmp_path, config, "analyze") == 0
    m = read_json(tmp_path / "out" / "analyze_manifest.json")["metrics"]
    assert sorted(m["metrics"]) == ["op:3-C", "op:3-DC", "rule:AA", "rule:MAX"]
    assert set(m["checks"]) == {"3-DC>=3-C", "AA>=MAX"}
    assert m["failures"] == []
    text = merge_reports([tmp_path / "out" / "analyze_manifest.json"]).splitlines()
    assert len(text) == 1 + 4 * 2  # header + variants x (clean, attacked) for one seed


def test_attack_gen_and_search(tmp_path, config):
    assert run(tmp_path, config, "attack-gen") == 0
    m = read_json(tmp_path / "out" / "attack-gen_manifest.json")["metrics"]
    assert len(m["attacked_hashes"]) == 6
    assert len(list((tmp_path / "out" / "attacked").iterdir())) >= 6
    assert run(tmp_path, config, "search") == 0
    rep = read_json(tmp_path / "out" / "search_report.json")
    assert len(rep["choice"]) == 6 and rep["arch"] is not None
