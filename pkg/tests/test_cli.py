import json

import pytest

from fedsim.cli import main


def write_config(tmp_path, extra=None):
    raw = {
        "algorithm": {"id": "fedavg_fixed_epochs"},
        "task": {"kind": "logistic_regression", "n_features": 5},
        "partition": {"mode": "iid", "clients": 3},
        "rounds": 4,
        "seed": 5,
    }
    raw.update(extra or {})
    path = tmp_path / "config.json"
    path.write_text(json.dumps(raw))
    return path


class TestRun:
    def test_run_writes_report(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        out = tmp_path / "out"
        code = main(["run", "--config", str(cfg), "--out", str(out)])
        assert code == 0
        assert (out / "report.json").exists()
        stdout = capsys.readouterr().out
        assert "content hash" in stdout

    def test_seed_and_fold_overrides(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert main(["run", "--config", str(cfg), "--seed", "9",
                     "--fold", "1"]) == 0
        report = json.loads((write_config(tmp_path)).read_text())
        out = capsys.readouterr().out
        assert "algorithm" in out

    def test_bad_config_exits_2(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"algorithm": "nope"}))
        assert main(["run", "--config", str(path)]) == 2

    def test_missing_config_exits_2(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "none.json")]) == 2

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    def test_runtime_error_exits_3(self, tmp_path):
        cfg = write_config(tmp_path, {
            "algorithm": {"id": "fedavg_fixed_epochs", "learning_rate": 9.9},
            "task": {"kind": "linear_regression", "n_features": 4,
                     "pool": {"size": 60, "noise": 0.0}},
            "rounds": 300,
        })
        assert main(["run", "--config", str(cfg)]) == 3


class TestCost:
    def test_profile_table(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {
            "partition": {"mode": "profile", "profile": "fets2022_challenge"}})
        csv_path = tmp_path / "table.csv"
        assert main(["cost", "--config", str(cfg), "--csv", str(csv_path)]) == 0
        out = capsys.readouterr().out
        assert "fedavg_fixed_epochs" in out
        assert "59400" in out
        assert "24600" in out
        assert "scaffold" in out
        assert csv_path.exists()
        rows = csv_path.read_text().strip().splitlines()
        assert rows[0].startswith("algorithm,")
        assert len(rows) == 17  # header + 16 algorithms


class TestPartition:
    def test_summary(self, tmp_path, capsys):
        cfg = write_config(tmp_path, {
            "partition": {"mode": "profile", "profile": "fets2022_limited"}})
        assert main(["partition", "--config", str(cfg), "--summary"]) == 0
        out = capsys.readouterr().out
        assert "total samples    278" in out
        assert "clients          18" in out


class TestReport:
    def test_pretty_print(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        out = tmp_path / "out"
        assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
        capsys.readouterr()
        assert main(["report", "--in", str(out)]) == 0
        text = capsys.readouterr().out
        assert "best val loss" in text
        assert "overall test metrics" in text
