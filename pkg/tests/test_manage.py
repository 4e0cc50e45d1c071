import json

import pytest
from click.testing import CliRunner

from manage import cli


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(f'database_url = "sqlite:///{tmp_path / "runs.db"}"\n')
    return path


def test_minimum_scan_command_writes_outputs(config_file, tmp_path) -> None:
    out = tmp_path / "out"

    result = CliRunner().invoke(cli, ["--config", str(config_file), "--out", str(out), "--json", "minimum-scan"])

    assert result.exit_code == 0, result.output
    payload = json.loads(result.stdout)
    assert payload["minimum_scan"]["summary"]["quadratic_um_per_v2"] == pytest.approx(6.1e-5, rel=1e-6)
    assert (out / "minimum_scan.csv").exists()
    assert (out / "minimum_scan.json").exists()


def test_history_shows_the_recorded_run(config_file, tmp_path) -> None:
    runner = CliRunner()
    runner.invoke(cli, ["--config", str(config_file), "--out", str(tmp_path / "out"), "calibrate"])

    result = runner.invoke(cli, ["--config", str(config_file), "--json", "show-history"])

    history = json.loads(result.stdout)
    assert history[0]["experiment"] == "calibrate"
    assert history[0]["status"] == "completed"


def test_invalid_config_exits_with_status_one(tmp_path) -> None:
    path = tmp_path / "bad.toml"
    path.write_text("[trap]\ntip_gap_mm = 0.35\n")

    result = CliRunner().invoke(cli, ["--config", str(path), "calibrate"])

    assert result.exit_code == 1


def test_missing_config_exits_with_status_one(tmp_path) -> None:
    result = CliRunner().invoke(cli, ["--config", str(tmp_path / "absent.toml"), "calibrate"])

    assert result.exit_code == 1
