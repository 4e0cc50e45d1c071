from pathlib import Path

import pytest

from config.settings import build_settings, config_hash, load_settings
from models.errors import ConfigurationError

DEFAULTS_TOML = Path(__file__).resolve().parent.parent / "config" / "defaults.toml"


def test_defaults_file_matches_the_built_in_defaults() -> None:
    from_file = load_settings(DEFAULTS_TOML)
    built_in = build_settings()

    assert from_file.model_dump() == built_in.model_dump()
    assert config_hash(from_file) == config_hash(built_in)


def test_unknown_key_is_named() -> None:
    with pytest.raises(ConfigurationError) as excinfo:
        build_settings(trap={"tip_gap_mm": 0.35})
    assert any("tip_gap_mm" in key for key in excinfo.value.keys)


def test_out_of_range_value_is_rejected() -> None:
    with pytest.raises(ConfigurationError) as excinfo:
        build_settings(detection={"phase_bins": 4})
    assert any("phase_bins" in key for key in excinfo.value.keys)


def test_environment_overrides_nested_values(monkeypatch) -> None:
    monkeypatch.setenv("FIBRETRAP_SERVO__DURATION_S", "0.5")

    assert build_settings().servo.duration_s == 0.5


def test_toml_file_and_seed_override(tmp_path) -> None:
    path = tmp_path / "run.toml"
    path.write_text("master_seed = 7\n\n[drive]\nv_main_v = 150.0\n")

    loaded = load_settings(path)
    reseeded = load_settings(path, master_seed=11, workers=None)

    assert loaded.master_seed == 7
    assert loaded.drive.v_main_v == 150.0
    assert reseeded.master_seed == 11
    assert reseeded.workers == 1


def test_missing_file_is_a_configuration_error(tmp_path) -> None:
    with pytest.raises(ConfigurationError):
        load_settings(tmp_path / "absent.toml")


def test_invalid_toml_is_a_configuration_error(tmp_path) -> None:
    path = tmp_path / "broken.toml"
    path.write_text("[drive\nv_main_v = ")

    with pytest.raises(ConfigurationError):
        load_settings(path)


def test_hash_tracks_simulation_values_only() -> None:
    base = config_hash(build_settings())

    assert config_hash(build_settings(master_seed=1)) != base
    assert config_hash(build_settings(drive={"v_main_v": 150.0})) != base
    assert config_hash(build_settings(workers=8, log_level="DEBUG")) == base


def test_derived_drive_quantities() -> None:
    drive = build_settings().drive

    assert drive.omega_rf == pytest.approx(2 * 3.141592653589793 * 20e6)
    assert drive.damping == pytest.approx(2 * 3.141592653589793 * 5e3)
