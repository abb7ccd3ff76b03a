import json

import numpy as np
import pytest
import yaml

from modets import cli
from modets.data import RawSeries, SynthSpec, synth_generate, write_csv
from modets.report import read_report, strip_timing

TINY = ["--lookback", "16", "--horizon", "4", "--d-model", "4", "--d-state", "4",
        "--n-layers", "1", "--epochs", "2", "--batch-size", "16"]


@pytest.fixture
def synth_file(tmp_path):
    p = tmp_path / "synth.yaml"
    p.write_text(yaml.safe_dump({"n": 240, "v": 2, "frequencies": [[0.05], [0.03]],
                                 "amplitudes": [[1.0], [0.7]], "trend_slope": 0.001, "seed": 1}))
    return p


def _files(root):
    return sorted(p.relative_to(root).as_posix() for p in root.rglob("*") if p.is_file())


class TestTrain:
    def test_report_has_finite_test_mse(self, tmp_path, synth_file, capsys):
        out = tmp_path / "run"
        code = cli.main(["train", "--synth", str(synth_file), "--output-dir", str(out),
                         "--horizons", "2", *TINY])
        assert code == 0
        rep = read_report(out / "report.jsonl")
        assert np.isfinite(rep.summary["test_mse"])
        assert [r["horizon"] for r in rep.rows] == [2, 4]
        assert isinstance(rep.summary["state_transition_ops"], int)
        assert rep.summary["state_transition_ops"] > 0
        assert _files(out) == ["checkpoint.mck", "report.jsonl", "runspec.json", "train_log.jsonl"]
        assert "test_mse" in capsys.readouterr().out

    def test_same_spec_same_report(self, tmp_path, synth_file):
        args = ["train", "--synth", str(synth_file), *TINY]
        assert cli.main([*args, "--output-dir", str(tmp_path / "a")]) == 0
        assert cli.main([*args, "--output-dir", str(tmp_path / "b")]) == 0
        a = read_report(tmp_path / "a" / "report.jsonl")
        b = read_report(tmp_path / "b" / "report.jsonl")
        a.config.pop("output_dir"), b.config.pop("output_dir")
        assert strip_timing(a) == strip_timing(b)
        assert (tmp_path / "a" / "checkpoint.mck").read_bytes() == \
            (tmp_path / "b" / "checkpoint.mck").read_bytes()

    def test_missing_dataset_is_usage_error(self, tmp_path, capsys):
        out = tmp_path / "run"
        code = cli.main(["train", "--data", str(tmp_path / "nope.csv"), "--output-dir", str(out)])
        assert code == 2
        assert not out.exists()
        assert "data:" in capsys.readouterr().err

    def test_no_dataset_at_all(self, tmp_path):
        assert cli.main(["train", "--output-dir", str(tmp_path / "run")]) == 2
        assert not (tmp_path / "run").exists()

    def test_field_level_message(self, tmp_path, synth_file, capsys):
        code = cli.main(["train", "--synth", str(synth_file), "--rank", "9", "--d-state", "4",
                         "--output-dir", str(tmp_path / "run")])
        assert code == 2
        assert "model: rank must lie in [1, d_state]" in capsys.readouterr().err

    def test_csv_input(self, tmp_path):
        s = synth_generate(SynthSpec(n=200, v=3, seed=2))
        write_csv(s, tmp_path / "d.csv")
        assert cli.main(["train", "--data", str(tmp_path / "d.csv"), "--output-dir",
                         str(tmp_path / "run"), *TINY]) == 0
        assert read_report(tmp_path / "run" / "report.jsonl").config["data"].endswith("d.csv")

    def test_output_root_from_environment(self, tmp_path, synth_file, monkeypatch):
        monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "root"))
        assert cli.main(["train", "--synth", str(synth_file), *TINY]) == 0
        runs = list((tmp_path / "root").iterdir())
        assert len(runs) == 1 and runs[0].name.startswith("train-")
        assert _files(tmp_path) == sorted(["synth.yaml"] + [f"root/{runs[0].name}/{f}" for f in
                                           _files(runs[0])])


class TestConfigFile:
    def test_flags_override_file(self, tmp_path, synth_file):
        cfg = tmp_path / "run.yaml"
        cfg.write_text(yaml.safe_dump({"synth": yaml.safe_load(synth_file.read_text()), "seed": 4,
                                       "model": {"lookback": 16, "horizon": 4, "d_model": 4,
                                                 "d_state": 4, "n_layers": 1},
                                       "train": {"epochs": 1, "lr": 0.01}}))
        out = tmp_path / "run"
        assert cli.main(["train", "--config", str(cfg), "--lr", "0.02", "--output-dir", str(out)]) == 0
        spec = json.loads((out / "runspec.json").read_text())
        assert spec["train"] == {"epochs": 1, "lr": 0.02}
        assert spec["seed"] == 4 and spec["model"]["d_state"] == 4
        assert read_report(out / "report.jsonl").config == spec

    def test_unknown_field(self, tmp_path):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"colour": "red"}))
        assert cli.main(["train", "--config", str(cfg), "--output-dir", str(tmp_path / "o")]) == 2

    def test_wrong_type(self, tmp_path, synth_file):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"stride": "two"}))
        assert cli.main(["train", "--config", str(cfg), "--synth", str(synth_file),
                         "--output-dir", str(tmp_path / "o")]) == 2

    def test_bad_flag_value_exits_two(self, tmp_path):
        assert cli.main(["bench-complexity", "--d-list", "a,b"]) == 2


class TestCheckpointCommands:
    @pytest.fixture
    def trained(self, tmp_path, synth_file):
        out = tmp_path / "train"
        assert cli.main(["train", "--synth", str(synth_file), "--output-dir", str(out), *TINY]) == 0
        return out

    def test_eval_matches_train_report(self, tmp_path, synth_file, trained):
        out = tmp_path / "eval"
        assert cli.main(["eval", "--synth", str(synth_file), "--checkpoint",
                         str(trained / "checkpoint.mck"), "--output-dir", str(out)]) == 0
        a = read_report(trained / "report.jsonl").summary
        b = read_report(out / "report.jsonl").summary
        assert a["test_mse"] == b["test_mse"] and a["test_raw_mae"] == b["test_raw_mae"]

    def test_eval_needs_checkpoint(self, tmp_path, synth_file):
        assert cli.main(["eval", "--synth", str(synth_file), "--output-dir", str(tmp_path / "e")]) == 2
        assert not (tmp_path / "e").exists()

    def test_predict_writes_forecast(self, tmp_path, synth_file, trained):
        out = tmp_path / "pred"
        assert cli.main(["predict", "--synth", str(synth_file), "--checkpoint",
                         str(trained / "checkpoint.mck"), "--output-dir", str(out)]) == 0
        lines = (out / "predictions.csv").read_text().splitlines()
        assert lines[0] == "date,x0,x1" and len(lines) == 5
        rep = read_report(out / "report.jsonl")
        assert [r["step"] for r in rep.rows] == [1, 2, 3, 4]
        # the synthetic series is hourly from t=0, so the forecast starts at row 240
        assert rep.rows[0]["timestamp"] == 240 * 3600.0

    def test_variate_mismatch(self, tmp_path, trained):
        write_csv(RawSeries(np.random.default_rng(0).normal(size=(100, 3)), np.arange(100.0)),
                  tmp_path / "d.csv")
        assert cli.main(["eval", "--data", str(tmp_path / "d.csv"), "--checkpoint",
                         str(trained / "checkpoint.mck"), "--output-dir", str(tmp_path / "e")]) == 2

    def test_corrupt_checkpoint(self, tmp_path, synth_file, trained):
        raw = bytearray((trained / "checkpoint.mck").read_bytes())
        raw[-3] ^= 0xFF
        (tmp_path / "bad.mck").write_bytes(bytes(raw))
        assert cli.main(["eval", "--synth", str(synth_file), "--checkpoint", str(tmp_path / "bad.mck"),
                         "--output-dir", str(tmp_path / "e")]) == 2

    def test_robustness_from_checkpoint(self, tmp_path, synth_file, trained):
        out = tmp_path / "rob"
        assert cli.main(["robustness", "--synth", str(synth_file), "--checkpoint",
                         str(trained / "checkpoint.mck"), "--std-list", "0,0.3",
                         "--output-dir", str(out)]) == 0
        rows = read_report(out / "report.jsonl").rows
        assert rows[0]["std"] == 0.0 and rows[0]["mse_growth"] == 0.0
        assert np.isfinite(rows[1]["mse_growth"])

    def test_robustness_trains_in_run(self, tmp_path, synth_file):
        out = tmp_path / "rob"
        assert cli.main(["robustness", "--synth", str(synth_file), "--std-list", "0",
                         "--output-dir", str(out), *TINY]) == 0
        assert (out / "checkpoint.mck").is_file()


class TestBenchCommands:
    def test_complexity_counts_only(self, tmp_path):
        out = tmp_path / "c"
        assert cli.main(["bench-complexity", "--d-list", "32,64", "--r-list", "8,16",
                         "--seq-len", "4", "--ode-steps", "2", "--repeats", "0",
                         "--output-dir", str(out)]) == 0
        rep = read_report(out / "report.jsonl")
        assert rep.summary["all_match_model"] and rep.summary["timed"] is False
        assert not any("seconds" in k for r in rep.rows for k in r)

    def test_selection(self, tmp_path):
        out = tmp_path / "s"
        assert cli.main(["bench-selection", "--segment", "8", "--k-list", "4", "--seq-len", "32",
                         "--state", "8", "--rank", "4", "--output-dir", str(out)]) == 0
        rows = {r["k"]: r for r in read_report(out / "report.jsonl").rows}
        assert rows[8]["full_updates"] == 32 and rows[4]["full_updates"] == 16

    def test_selection_rejects_k_above_s(self, tmp_path):
        assert cli.main(["bench-selection", "--segment", "4", "--k-list", "5",
                         "--output-dir", str(tmp_path / "s")]) == 2
        assert not (tmp_path / "s").exists()


class TestLookback:
    def test_rows_sorted_and_skips_noted(self, tmp_path, synth_file):
        out = tmp_path / "lb"
        args = ["lookback", "--synth", str(synth_file), "--lookbacks", "24,16,400",
                "--output-dir", str(out), *TINY]
        assert cli.main(args) == 0
        rep = read_report(out / "report.jsonl")
        assert [r["lookback"] for r in rep.rows] == [16, 24]
        assert all(np.isfinite(r["mse"]) for r in rep.rows)
        assert any("L=400" in n for n in rep.notes)


def test_runtime_failure_exit_code(tmp_path, synth_file, monkeypatch):
    from modets.training import TrainingError

    def boom(*a, **k):
        raise TrainingError("non-finite value at step 0 (epoch 1, batch 0)")

    monkeypatch.setattr(cli, "train", boom)
    assert cli.main(["train", "--synth", str(synth_file), "--output-dir", str(tmp_path / "o"),
                     *TINY]) == 3
