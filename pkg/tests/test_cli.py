import csv
import hashlib
import json

import pytest

from vrs.cli import main

TINY = {
    "schema_version": 1, "n_users": 600, "n_ads": 30, "n_requests": 4000, "n_days": 4,
    "warmup_requests": 1000, "calibration_requests": 1500, "collect_requests": 6000,
    "min_impressions": 40, "click_examples": 1500, "click_epochs": 2, "reward_max_updates": 150,
}


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "config.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["generate", "--config", str(cfg), "--out", str(d / "world.json")]) == 0
    assert main(["collect", "--world", str(d / "world.json"), "--out", str(d / "col")]) == 0
    assert main(["train", "--episodes", str(d / "col"), "--config", str(cfg), "--out", str(d / "ck")]) == 0
    assert main(["evaluate", "--world", str(d / "world.json"), "--checkpoints", str(d / "ck"),
                 "--embeddings", str(d / "col" / "embeddings.csv"), "--seeds", "0", "1",
                 "--out", str(d / "ev")]) == 0
    return d


def test_generate_is_deterministic(pipeline, tmp_path):
    out = tmp_path / "w2.json"
    assert main(["generate", "--config", str(pipeline / "config.json"), "--out", str(out)]) == 0
    assert sha(out) == sha(pipeline / "world.json")


def test_generate_rejects_bad_config(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({**TINY, "n_users": -1}))
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "w.json")]) == 2
    assert "n_users" in capsys.readouterr().err
    assert not (tmp_path / "w.json").exists()
    assert main(["generate", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "w.json")]) == 2
    cfg.write_text(json.dumps({**TINY, "schema_version": 9}))
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "w.json")]) == 2


def test_collect_outputs(pipeline):
    summary = json.loads((pipeline / "col" / "summary.json").read_text())
    assert summary["config"]["schema_version"] == 1
    for pc in ("gender", "race"):
        lines = (pipeline / "col" / f"episodes_{pc}.jsonl").read_text().splitlines()
        assert len(lines) == 2 * summary["pcs"][pc]["kept"] > 0
        assert all(json.loads(line)["pc"] == pc for line in lines)


def test_collect_is_deterministic(pipeline, tmp_path):
    assert main(["collect", "--world", str(pipeline / "world.json"), "--out", str(tmp_path / "c2")]) == 0
    for name in ("episodes_gender.jsonl", "episodes_race.jsonl", "summary.json", "embeddings.csv"):
        assert sha(tmp_path / "c2" / name) == sha(pipeline / "col" / name)


def test_collect_without_housing_ads(tmp_path, caplog):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({**TINY, "housing_fraction": 0.0}))
    assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "w.json")]) == 0
    assert main(["collect", "--world", str(tmp_path / "w.json"), "--out", str(tmp_path / "col")]) == 0
    assert (tmp_path / "col" / "episodes_gender.jsonl").read_text() == ""
    assert "no housing ads" in caplog.text


def test_train_outputs(pipeline):
    for pc in ("gender", "race"):
        ck = json.loads((pipeline / "ck" / f"controller_{pc}.json").read_text())
        assert ck["pc"] == pc and ck["config"]["schema_version"] == 1
        curve = rows(pipeline / "ck" / f"training_curve_{pc}.csv")
        assert list(curve[0]) == ["update", "loss", "mean_abs_adjust_up_difference"]
        assert float(curve[-1]["loss"]) < float(curve[0]["loss"])


def test_train_wrong_pc_log(pipeline, tmp_path, capsys):
    code = main(["train", "--episodes", str(pipeline / "col" / "episodes_race.jsonl"), "--pc", "gender",
                 "--config", str(pipeline / "config.json"), "--out", str(tmp_path)])
    assert code == 2
    assert "expected 'gender'" in capsys.readouterr().err


def test_evaluate_outputs(pipeline):
    summary = rows(pipeline / "ev" / "summary.csv")
    assert [(r["arm"], r["pc"]) for r in summary] == [
        ("test1", "gender"), ("test1", "race"), ("test2", "gender"), ("test2", "race")]
    assert list(summary[0]) == ["arm", "pc", "seed_0", "seed_1", "mean"]
    curve = rows(pipeline / "ev" / "ncac_reduction_curve.csv")
    assert len(curve) == TINY["n_days"] * 2 * 2
    daily = rows(pipeline / "ev" / "daily_metrics.csv")
    assert {"day", "arm", "pc", "ncac", "coverage", "mean_variance"} <= set(daily[0])
    report = json.loads((pipeline / "ev" / "report.json").read_text())
    assert report["seeds"] == [0, 1]
    assert report["calibration"]["test1/seed_0"]["up_multiplier"] >= 1


def test_control_vs_control_is_null(pipeline, tmp_path):
    assert main(["evaluate", "--world", str(pipeline / "world.json"), "--arm", "control",
                 "--seeds", "0", "1", "--out", str(tmp_path)]) == 0
    for r in rows(tmp_path / "summary.csv"):
        assert r["mean"] == "" or float(r["mean"]) == 0.0


def test_evaluate_is_byte_deterministic(pipeline, tmp_path):
    assert main(["evaluate", "--world", str(pipeline / "world.json"), "--checkpoints", str(pipeline / "ck"),
                 "--embeddings", str(pipeline / "col" / "embeddings.csv"), "--seeds", "0", "1",
                 "--out", str(tmp_path)]) == 0
    for name in ("summary.csv", "ncac_reduction_curve.csv", "daily_metrics.csv", "report.json"):
        assert sha(tmp_path / name) == sha(pipeline / "ev" / name)


def test_evaluate_flags(pipeline, tmp_path):
    code = main(["evaluate", "--world", str(pipeline / "world.json"), "--checkpoints",
                 str(pipeline / "ck" / "controller_gender.json"), "--pc", "gender", "--arm", "test1",
                 "--voting", "max", "--days", "2", "--out", str(tmp_path)])
    assert code == 0
    curve = rows(tmp_path / "ncac_reduction_curve.csv")
    assert {(r["arm"], r["pc"]) for r in curve} == {("test1", "gender")} and len(curve) == 2
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["config"]["voting_scheme"] == "max" and report["config"]["n_days"] == 2


def test_evaluate_missing_checkpoint(pipeline, tmp_path):
    code = main(["evaluate", "--world", str(pipeline / "world.json"), "--checkpoints",
                 str(pipeline / "ck" / "controller_gender.json"), "--out", str(tmp_path)])
    assert code == 2


def test_report(pipeline, tmp_path):
    src = str(pipeline / "ev" / "ncac_reduction_curve.csv")
    assert main(["report", src, "--gnuplot", "--out", str(tmp_path / "a")]) == 0
    assert main(["report", src, "--gnuplot", "--out", str(tmp_path / "b")]) == 0
    data = rows(tmp_path / "a" / "plot_data.csv")
    assert list(data[0]) == ["day", "series", "value"]
    assert sha(tmp_path / "a" / "plot_data.csv") == sha(tmp_path / "b" / "plot_data.csv")
    assert "plot " in (tmp_path / "a" / "ncac_reduction.gp").read_text()


def test_report_missing_input(tmp_path):
    assert main(["report", str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) == 2


def test_bad_arguments_exit_2():
    assert main(["evaluate", "--arm", "test9"]) == 2
    assert main([]) == 2
