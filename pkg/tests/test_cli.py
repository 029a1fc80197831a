import json
from pathlib import Path

import pytest

from mobisim.cli import cli_main


@pytest.fixture(scope="module")
def world_files(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("world")
    rc = cli_main(["synth", "--out", str(out), "--rows", "5", "--cols", "5",
                   "--spacing", "600", "--pois", "120", "--agents", "60",
                   "--seed", "3", "--stadium"])
    assert rc == 0
    return out


def _base_args(out: Path) -> list[str]:
    return ["--network", str(out / "network.json"), "--pois", str(out / "pois.json"),
            "--population", str(out / "population.json")]


def test_validate_good_fixtures_exits_zero(world_files, capsys):
    rc = cli_main(["validate"] + _base_args(world_files))
    assert rc == 0
    assert "OK" in capsys.readouterr().out


def test_validate_scenario_fixture(world_files, fixtures_dir):
    rc = cli_main(["validate"] + _base_args(world_files)
                  + ["--scenario", str(fixtures_dir / "scenario_event.json")])
    assert rc == 0


def test_generate_is_seed_deterministic(world_files, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert cli_main(["generate"] + _base_args(world_files)
                    + ["--out", str(a), "--seed", "7"]) == 0
    assert cli_main(["generate"] + _base_args(world_files)
                    + ["--out", str(b), "--seed", "7"]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_run_missing_scenario_file_fails_with_path(world_files, tmp_path, capsys):
    rc = cli_main(["run"] + _base_args(world_files)
                  + ["--scenario", str(tmp_path / "nope.json"), "--out", str(tmp_path / "r")])
    assert rc != 0
    assert "nope.json" in capsys.readouterr().err


def test_bad_flags_exit_nonzero(capsys):
    assert cli_main(["run", "--no-such-flag"]) != 0
    assert cli_main(["frobnicate"]) != 0


def test_run_and_replay_report(world_files, tmp_path, capsys):
    report_dir = tmp_path / "report"
    rc = cli_main(["run"] + _base_args(world_files)
                  + ["--out", str(report_dir), "--horizon", "3600", "--seed", "5",
                     "--env-update", "600"])
    assert rc == 0
    assert (report_dir / "metrics.csv").exists()
    assert (report_dir / "final_chains.json").exists()
    summary = json.loads((report_dir / "summary.json").read_text())
    assert summary["agents"] == 60

    capsys.readouterr()
    rc = cli_main(["replay-report", "--report", str(report_dir)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "run summary" in out
    assert "peak_active_agents" in out


def test_run_with_config_override(world_files, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"heatmap_period": 1200.0, "pause_threshold": 9999}))
    report_dir = tmp_path / "report2"
    rc = cli_main(["run"] + _base_args(world_files)
                  + ["--out", str(report_dir), "--horizon", "2400", "--seed", "5",
                     "--env-update", "600", "--config", str(cfg)])
    assert rc == 0
    heatmaps = list((report_dir / "heatmaps").glob("*.txt"))
    assert len(heatmaps) == 2  # 1200 and 2400


def test_run_with_unknown_config_key_fails(world_files, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bogus_knob": 1}))
    rc = cli_main(["run"] + _base_args(world_files)
                  + ["--out", str(tmp_path / "r"), "--config", str(cfg)])
    assert rc == 2
    assert "bogus_knob" in capsys.readouterr().err
