import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from calodqm.cli import main


@pytest.fixture()
def runner():
    return CliRunner()


def _config(out_root, exp_id="t", tl=None):
    return {
        "experiment_id": exp_id,
        "seed": 77,
        "out_root": str(out_root),
        "target": {"subdetector": "custom", "dims": [8, 24, 2], "rbx_count": 4, "n_ls": 90},
        "train": {"epochs": 1, "T": 5, "batch_size": 6},
        "tl": tl or {"init_mode": "RANDOM", "train_mode": "No-TL"},
        "inject": {"n_maps_per_kind": 25, "n_channels": 4},
    }


class TestStages:
    def test_gen_preprocess_train_score(self, runner, tmp_path):
        r = runner.invoke(main, [
            "gen-data", "--subdetector", "custom", "--dims", "8,24,2",
            "--rbx-count", "4", "--n-ls", "40", "--seed", "5",
            "--out", str(tmp_path / "raw"),
        ])
        assert r.exit_code == 0, r.output
        r = runner.invoke(main, [
            "preprocess", "--in", str(tmp_path / "raw"), "--out", str(tmp_path / "prep"),
        ])
        assert r.exit_code == 0, r.output
        assert (tmp_path / "prep" / "minmax_1.json").exists()
        cfg = tmp_path / "train.json"
        cfg.write_text(json.dumps({"epochs": 1}))
        r = runner.invoke(main, [
            "train", "--data", str(tmp_path / "prep"), "--config", str(cfg),
            "--seed", "3", "--out", str(tmp_path / "ck"),
        ])
        assert r.exit_code == 0, r.output
        assert (tmp_path / "ck" / "history.csv").exists()
        r = runner.invoke(main, [
            "score", "--ckpt", str(tmp_path / "ck"), "--data", str(tmp_path / "prep"),
            "--calib", str(tmp_path / "sigma.json"), "--out", str(tmp_path / "sc"),
        ])
        assert r.exit_code == 0, r.output
        assert (tmp_path / "sc" / "index.json").exists()

    def test_gen_data_bad_geometry_fails(self, runner, tmp_path):
        r = runner.invoke(main, [
            "gen-data", "--subdetector", "custom", "--dims", "8,24,2",
            "--rbx-count", "7", "--out", str(tmp_path / "raw"),
        ])
        assert r.exit_code != 0

    def test_inject_bad_factor_fails(self, runner, tmp_path):
        runner.invoke(main, [
            "gen-data", "--subdetector", "custom", "--dims", "8,24,2",
            "--rbx-count", "4", "--n-ls", "20", "--out", str(tmp_path / "raw"),
        ])
        r = runner.invoke(main, [
            "inject", "--data", str(tmp_path / "raw"), "--kind", "degraded",
            "--rd", "1.5", "--out", str(tmp_path / "inj"),
        ])
        assert r.exit_code != 0


class TestPipeline:
    def test_invalid_combo_rejected_before_work(self, runner, tmp_path):
        cfg = _config(tmp_path / "runs", tl={"init_mode": "RANDOM", "train_mode": "TL-6"})
        p = tmp_path / "bad.json"
        p.write_text(json.dumps(cfg))
        r = runner.invoke(main, ["run-pipeline", "--config", str(p)])
        assert r.exit_code != 0
        assert not (tmp_path / "runs").exists()

    def test_rerun_reproduces_metrics(self, runner, tmp_path):
        outputs = []
        for name in ("a", "b"):
            cfg = _config(tmp_path / name)
            p = tmp_path / f"{name}.json"
            p.write_text(json.dumps(cfg))
            r = runner.invoke(main, ["run-pipeline", "--config", str(p)])
            assert r.exit_code == 0, r.output
            outputs.append((tmp_path / name / "t" / "report" / "metrics.csv").read_bytes())
        assert outputs[0] == outputs[1]

    def test_compare_runs_baseline_delta_zero(self, runner, tmp_path):
        cfg = _config(tmp_path / "runs")
        p = tmp_path / "c.json"
        p.write_text(json.dumps(cfg))
        r = runner.invoke(main, ["run-pipeline", "--config", str(p)])
        assert r.exit_code == 0, r.output
        out_csv = tmp_path / "cmp.csv"
        r = runner.invoke(main, [
            "compare-runs", str(tmp_path / "runs" / "t"), "--out", str(out_csv),
        ])
        assert r.exit_code == 0, r.output
        assert "+0.00%" in r.output

    def test_compare_runs_requires_baseline(self, runner, tmp_path):
        cfg = _config(tmp_path / "runs", exp_id="tl", tl={"init_mode": "TL-4", "train_mode": "No-TL"})
        cfg["source"] = {"subdetector": "custom", "dims": [8, 24, 2], "rbx_count": 4, "n_ls": 60}
        p = tmp_path / "tl.json"
        p.write_text(json.dumps(cfg))
        r = runner.invoke(main, ["run-pipeline", "--config", str(p)])
        assert r.exit_code == 0, r.output
        r = runner.invoke(main, ["compare-runs", str(tmp_path / "runs" / "tl")])
        assert r.exit_code != 0
