import numpy as np
import pytest

from models.errors import ConfigurationError
from services.experiments import ExperimentRunner, experiment_id
from services.fitkit import fit_gaussian_spot_2d
from services.optics import render_ion_image
from services.report_writer import ReportWriter


def _write(runner: ExperimentRunner, result, out_dir) -> dict:
    writer = ReportWriter(out_dir, runner.config_hash, runner.settings.master_seed)
    return {path.name: path.read_bytes() for path in writer.write_result(result)}


def test_minimum_scan_closes_the_calibration(runner_factory) -> None:
    result = runner_factory().run_minimum_scan()

    assert result.summary["quadratic_um_per_v2"] == pytest.approx(6.1e-5, rel=1e-6)
    assert result.summary["linear_um_per_v"] == pytest.approx(-0.1, rel=1e-6)
    assert result.table.n_rows == 21
    assert result.table.metadata["experiment"] == "minimum_scan"


def test_secular_scan_slopes(runner_factory) -> None:
    result = runner_factory().run_secular_slope_scan()

    assert result.summary["axial_slope_khz_per_v"] == pytest.approx(7.3, rel=1e-6)
    assert result.summary["radial_slope_khz_per_v"] == pytest.approx(3.65, rel=1e-6)
    assert result.summary["max_ratio_deviation"] < 1e-6


def test_empty_amplitude_list_is_a_configuration_error(runner_factory) -> None:
    with pytest.raises(ConfigurationError) as excinfo:
        runner_factory(scan={"minimum_amplitudes_v": []})
    assert any("minimum_amplitudes_v" in key for key in excinfo.value.keys)


def test_unknown_phase_channel_is_rejected(runner_factory) -> None:
    with pytest.raises(ConfigurationError):
        runner_factory().run_phase_scan("diagonal")


def test_point_seeds_separate_experiments_and_points(runner_factory) -> None:
    runner = runner_factory()

    assert runner.point_seed("axial_scan", 3) == runner.point_seed("axial_scan", 3)
    assert runner.point_seed("axial_scan", 3) != runner.point_seed("axial_scan", 4)
    assert experiment_id("axial_scan") != experiment_id("radial_map")


def test_outputs_do_not_depend_on_worker_count(runner_factory, tmp_path) -> None:
    serial = runner_factory(workers=1)
    threaded = runner_factory(workers=4)

    first = _write(serial, serial.run_axial_standing_wave_scan(), tmp_path / "serial")
    second = _write(threaded, threaded.run_axial_standing_wave_scan(), tmp_path / "threaded")

    assert serial.config_hash == threaded.config_hash
    assert first == second


def test_seed_changes_the_noisy_counts(runner_factory) -> None:
    first = runner_factory(master_seed=1).run_axial_standing_wave_scan()
    second = runner_factory(master_seed=2).run_axial_standing_wave_scan()

    assert not np.array_equal(first.table.column("counts"), second.table.column("counts"))
    assert np.array_equal(first.table.column("expected_counts"), second.table.column("expected_counts"))


def test_axial_standing_wave_spacing_and_visibility(runner_factory) -> None:
    result = runner_factory().run_axial_standing_wave_scan()

    assert result.summary["antinode_spacing_nm"] == pytest.approx(433.0, abs=2.0)
    assert result.summary["visibility"] == pytest.approx(0.83, abs=0.03)


def test_calibrate_reports_the_closure(runner_factory) -> None:
    result = runner_factory().calibrate()

    assert result.fits["closure"]["c2"] == pytest.approx(6.1e-5, rel=1e-6)
    assert result.summary["amplifier_gain"] == pytest.approx(173.0, rel=0.05)


def test_configured_amplifier_gain_wins(runner_factory) -> None:
    runner = runner_factory(drive={"amplifier_gain_v_per_vpp": 150.0})

    assert runner.amplifier_gain == 150.0


@pytest.mark.slow
def test_radial_phase_scan_is_linear_through_zero(runner_factory) -> None:
    result = runner_factory(workers=4).run_phase_scan("radial")
    trajectory = result.summary["trajectory"]

    assert trajectory["r_squared"] >= 0.99
    assert abs(trajectory["zero_crossing_rad"]) <= 0.002
    assert result.summary["polarity_flip"]
    assert result.summary["slope_ratio"] == pytest.approx(1.0, rel=0.10)


@pytest.mark.slow
def test_phase_scan_without_extra_rf_stays_at_the_noise_floor(runner_factory) -> None:
    result = runner_factory(workers=4, scan={"phase_radial_amplitude_v": 0.0}).run_phase_scan("radial")

    correlation = result.table.column("correlation_counts")
    errors = result.table.column("correlation_counts_err")

    assert np.abs(result.table.column("amplitude_nm")).max() < 1e-3
    assert result.summary["predicted_slope_nm_per_rad"] == 0.0
    assert np.all(np.abs(correlation) < 4 * errors)


@pytest.mark.slow
def test_axial_phase_scan_flips_polarity(runner_factory) -> None:
    result = runner_factory(workers=4).run_phase_scan("axial")

    assert result.summary["trajectory"]["r_squared"] >= 0.99
    assert result.summary["polarity_flip"]
    assert result.summary["correlation_polarity_flip"]


@pytest.mark.slow
def test_radial_mode_map_recovers_the_waist(runner_factory) -> None:
    result = runner_factory(workers=4, scan={"noiseless": True}).run_radial_mode_map()

    assert result.summary["converged"]
    assert result.summary["waist_um"] == pytest.approx(8.51, abs=0.15)
    assert result.summary["center_um"] == pytest.approx(-3.9, abs=0.3)


@pytest.mark.slow
def test_displacement_calibration_slope_follows_the_gain(runner_factory) -> None:
    runner = runner_factory()
    nominal = runner.run_displacement_calibration()
    doubled = runner.run_displacement_calibration(amplifier_gain=2 * runner.amplifier_gain)

    assert nominal.summary["abs_slope_um_per_vpp"] == pytest.approx(17.3, rel=0.02)
    assert doubled.summary["abs_slope_um_per_vpp"] / nominal.summary["abs_slope_um_per_vpp"] == pytest.approx(2.0, rel=0.03)
    assert "frame_reference" in nominal.artifacts


@pytest.mark.slow
def test_servo_simulation_summary(runner_factory) -> None:
    result = runner_factory().run_servo_simulation()

    assert result.summary["margins"]["phase_margin_deg"] >= 30.0
    assert result.summary["residual_fraction_of_linewidth"] <= 1 / 13
    assert result.summary["lock"]["capture_fraction"] == 0.0
    assert result.table.columns == ["f_Hz", "mag_dB", "phase_deg"]


def test_repeated_zero_setting_frames_scatter_below_a_tenth_of_a_pixel(runner_factory) -> None:
    runner = runner_factory()
    detection = runner.settings.detection
    camera = detection.to_camera()

    centroids = []
    for index in range(10):
        frame = render_ion_image(
            (0.0, 0.0), 0.0, camera, detection.camera_exposure_s, detection.camera_photon_rate_cps,
            runner.point_seed("displacement_cal", index),
        )
        spot = fit_gaussian_spot_2d(frame, camera)
        centroids.append((spot["x0"], spot["y0"]))

    assert np.all(np.std(centroids, axis=0) < 0.1)
