import json
import os

import pytest

from fusioncast.cli import main

TINY_CFG = {
    "split.lookback": 8,
    "split.horizons": [6],
    "model.d_ts": 16,
    "model.n_heads": 2,
    "model.d_text": 16,
    "train.stage1_epochs": 1,
    "train.stage2_epochs": 1,
    "train.stage3_epochs": 1,
    "train.stage3_lr_candidates": [0.0005],
    "data.name": "tiny",
    "data.description": "synthetic check data",
}


def write_cfg(path, extra=None):
    cfg = dict(TINY_CFG)
    cfg.update(extra or {})
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_chain")
    cfgfile = write_cfg(root / "cfg.json")
    out = str(root / "run")
    base = ["--config", cfgfile, "--out", out, "--seed", "3"]
    assert main(["synth", *base, "--n-points", "300"]) == 0
    for cmd in ("prepare", "precompute-events", "build-kb", "train", "predict", "evaluate"):
        assert main([cmd, *base]) == 0, cmd
    return out, base


class TestChain:
    def test_artifacts_exist(self, run_dir):
        out, _ = run_dir
        for rel in (
            "config.json",
            "dataset/series.csv",
            "prepared/meta.json",
            "events/H6/train.jsonl",
            "events/H6/val.jsonl",
            "events/H6/test.jsonl",
            "kb/H6.jsonl",
            "checkpoints/H6/final.json",
            "predictions/H6.csv",
            "reports/evaluation.json",
            "reports/evaluation.csv",
            "reports/evaluation.txt",
            "reports/curves_H6.csv",
        ):
            assert os.path.exists(os.path.join(out, rel)), rel

    def test_report_sane(self, run_dir):
        out, _ = run_dir
        report = json.load(open(os.path.join(out, "reports", "evaluation.json")))
        row = report["horizons"][0]
        assert row["n_windows"] == 60 - 8 - 6 + 1  # no-drop-last count on the test split
        assert set(row["branches"]) >= {"ts", "numerical", "final", "event"}

    def test_evaluate_idempotent_no_new_client_calls(self, run_dir):
        out, base = run_dir
        report_path = os.path.join(out, "reports", "evaluation.json")
        before_bytes = open(report_path, "rb").read()
        cache_files = set(os.listdir(os.path.join(out, "cache")))
        assert main(["evaluate", *base]) == 0
        assert open(report_path, "rb").read() == before_bytes
        assert set(os.listdir(os.path.join(out, "cache"))) == cache_files

    def test_analyze(self, run_dir):
        out, base = run_dir
        assert main(["analyze", *base]) == 0
        for rel in ("analysis/bands_H6.csv", "analysis/filtered_low_H6.csv",
                    "analysis/boundary_sweep_H6.csv"):
            assert os.path.exists(os.path.join(out, rel)), rel

    def test_replay_client_reproduces_oracle_run(self, run_dir, tmp_path):
        out, base = run_dir
        cfg_path = [a for a in base if a.endswith("cfg.json")][0]
        out2 = str(tmp_path / "replay_run")
        cache = os.path.join(out, "cache")
        base2 = ["--config", cfg_path, "--out", out2, "--seed", "3",
                 "--client", "replay", "--cache-dir", cache,
                 "--series", os.path.join(out, "dataset/series.csv"),
                 "--text", os.path.join(out, "dataset/text.csv"),
                 "--labels", os.path.join(out, "dataset/labels.csv")]
        for cmd in ("prepare", "precompute-events", "build-kb", "train", "evaluate"):
            assert main([cmd, *base2]) == 0, cmd
        a = open(os.path.join(out, "reports", "evaluation.json"), "rb").read()
        b = open(os.path.join(out2, "reports", "evaluation.json"), "rb").read()
        assert a == b


class TestDependencies:
    def test_evaluate_before_train_names_train(self, tmp_path, capsys):
        cfgfile = write_cfg(tmp_path / "cfg.json")
        out = str(tmp_path / "run")
        base = ["--config", cfgfile, "--out", out, "--seed", "1"]
        assert main(["synth", *base, "--n-points", "300"]) == 0
        rc = main(["evaluate", *base])
        err = capsys.readouterr().err
        assert rc == 1
        assert err.startswith("ERROR dependency")
        assert "train" in err

    def test_precompute_before_prepare(self, tmp_path, capsys):
        cfgfile = write_cfg(tmp_path / "cfg.json")
        out = str(tmp_path / "run")
        base = ["--config", cfgfile, "--out", out, "--seed", "1"]
        assert main(["synth", *base, "--n-points", "300"]) == 0
        rc = main(["precompute-events", *base])
        err = capsys.readouterr().err
        assert rc == 1
        assert "prepare" in err

    def test_missing_dataset(self, tmp_path, capsys):
        cfgfile = write_cfg(tmp_path / "cfg.json")
        rc = main(["prepare", "--config", cfgfile, "--out", str(tmp_path / "nodata")])
        assert rc == 1
        assert "ERROR" in capsys.readouterr().err


class TestConfigPrecedence:
    def test_flag_overrides_file(self, tmp_path):
        cfgfile = write_cfg(tmp_path / "cfg.json", {"run.seed": 5})
        out = str(tmp_path / "run")
        assert main(["synth", "--config", cfgfile, "--out", out, "--seed", "9",
                     "--n-points", "120"]) == 0
        snap = json.load(open(os.path.join(out, "config.json")))
        assert snap["run.seed"] == 9
        assert snap["split.lookback"] == 8  # from file
        assert snap["train.batch_size"] == 32  # default

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"nonsense.key": 1}))
        rc = main(["prepare", "--config", str(bad), "--out", str(tmp_path / "x")])
        assert rc == 1
        assert "ERROR config" in capsys.readouterr().err

    def test_unknown_variant_rejected(self, tmp_path, capsys):
        cfgfile = write_cfg(tmp_path / "cfg.json")
        rc = main(["prepare", "--config", cfgfile, "--out", str(tmp_path / "x"),
                   "--variant", "nonsense"])
        assert rc == 1
        assert "ERROR argument" in capsys.readouterr().err


class TestTrainDeterminism:
    def test_same_seed_identical_outputs(self, tmp_path):
        cfgfile = write_cfg(tmp_path / "cfg.json")
        reports = []
        for name in ("a", "b"):
            out = str(tmp_path / name)
            base = ["--config", cfgfile, "--out", out, "--seed", "7"]
            assert main(["synth", *base, "--n-points", "300"]) == 0
            for cmd in ("prepare", "precompute-events", "build-kb", "train", "evaluate"):
                assert main([cmd, *base]) == 0
            reports.append({
                "eval": open(os.path.join(out, "reports/evaluation.json"), "rb").read(),
                "ck": open(os.path.join(out, "checkpoints/H6/final.json"), "rb").read(),
                "kb": open(os.path.join(out, "kb/H6.jsonl"), "rb").read(),
            })
        assert reports[0] == reports[1]
