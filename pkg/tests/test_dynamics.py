import numpy as np
import pytest

from models.errors import ConfigurationError, FitError, TrajectoryEscapeError
from models.motion import Trajectory
from models.trap import RADIAL_Y
from services.dynamics import (
    integrate_trajectory,
    micromotion_phasor,
    mismatch_micromotion_prediction,
    mismatch_params,
    predicted_micromotion,
    secular_spectrum_peak,
    steady_state_start,
)
from services.trap_model import find_rf_null, secular_frequencies

UM = 1e-6


@pytest.mark.slow
def test_trajectory_secular_peaks_match_pseudopotential(trap_model, main_drive) -> None:
    sec = secular_frequencies(trap_model, main_drive)
    traj = integrate_trajectory(
        trap_model, main_drive, r0=(1 * UM, 0.5 * UM, 1 * UM), duration=1000 * main_drive.period
    )

    axial = secular_spectrum_peak(traj, 2, band=(0.5 * sec.axial, 1.5 * sec.axial))
    radial = secular_spectrum_peak(traj, 0, band=(0.5 * sec.radial[0], 1.5 * sec.radial[0]))

    assert axial == pytest.approx(sec.axial, rel=0.05)
    assert radial == pytest.approx(sec.radial[0], rel=0.05)


def test_first_order_micromotion_matches_integration(trap_model, main_drive) -> None:
    drive = main_drive.with_channel(RADIAL_Y, 50.0, phase=0.02)
    r0, v0 = steady_state_start(trap_model, drive)
    traj = integrate_trajectory(
        trap_model, drive, damping=2 * np.pi * 5e3, r0=r0, v0=v0, duration=60 * drive.period
    )

    measured = micromotion_phasor(traj, drive.omega_rf)
    predicted = predicted_micromotion(trap_model, drive)

    assert measured.amplitudes[1] == pytest.approx(predicted.amplitudes[1], rel=0.10)
    assert measured.amplitudes[1] > 10 * measured.amplitudes[2]


def test_mismatch_formula_agrees_with_field_response(trap_model, main_drive) -> None:
    drive = main_drive.with_channel(RADIAL_Y, 50.0, phase=0.02)
    params = mismatch_params(trap_model, drive, RADIAL_Y)

    assert params.delta == pytest.approx(0.02)
    assert mismatch_micromotion_prediction(params) == pytest.approx(
        predicted_micromotion(trap_model, drive).amplitudes[1], rel=0.10
    )


def test_micromotion_polarity_flips_with_the_phase_sign(trap_model, main_drive) -> None:
    plus = predicted_micromotion(trap_model, main_drive.with_channel(RADIAL_Y, 50.0, phase=0.02))
    minus = predicted_micromotion(trap_model, main_drive.with_channel(RADIAL_Y, 50.0, phase=-0.02))
    reference = plus.phases[1]

    assert plus.signed_amplitude(1, reference) > 0
    assert minus.signed_amplitude(1, reference) < 0


def test_in_phase_drive_has_no_excess_micromotion(trap_model, main_drive) -> None:
    predicted = predicted_micromotion(trap_model, main_drive.with_channel(RADIAL_Y, 50.0))

    assert np.all(predicted.amplitudes < 1e-15)


def test_damped_secular_amplitude_decays_at_half_the_damping_rate(trap_model, main_drive) -> None:
    damping = 2 * np.pi * 50e3
    traj = integrate_trajectory(
        trap_model, main_drive, damping=damping, r0=(0.0, 0.0, 1 * UM), duration=300 * main_drive.period
    )

    window = 20 * 200
    n_windows = (len(traj) - 1) // window
    z = np.abs(traj.positions[1:, 2])
    peaks = np.array([z[k * window:(k + 1) * window].max() for k in range(n_windows)])
    centres = traj.times[1:][window // 2::window][:n_windows]
    slope = np.polyfit(centres, np.log(peaks), 1)[0]

    assert -slope == pytest.approx(damping / 2, rel=0.05)


def test_escaping_ion_reports_the_escape_time(trap_model, main_drive) -> None:
    with pytest.raises(TrajectoryEscapeError) as excinfo:
        integrate_trajectory(trap_model, main_drive, v0=(1e4, 0.0, 0.0))
    assert 0 < excinfo.value.escape_time < 50 * main_drive.period


def test_integration_preconditions(trap_model, main_drive) -> None:
    with pytest.raises(ConfigurationError):
        integrate_trajectory(trap_model, main_drive, dt=main_drive.period / 50)
    with pytest.raises(ConfigurationError):
        integrate_trajectory(trap_model, main_drive, duration=10 * main_drive.period)
    with pytest.raises(ConfigurationError):
        integrate_trajectory(trap_model, main_drive, damping=-1.0)


def test_trajectory_is_deterministic_for_a_seed(trap_model, main_drive) -> None:
    first = integrate_trajectory(trap_model, main_drive, kick_sigma=1e-3, seed=[7, 1])
    second = integrate_trajectory(trap_model, main_drive, kick_sigma=1e-3, seed=[7, 1])

    assert np.array_equal(first.positions, second.positions)
    assert first.dt <= main_drive.period / 100


def test_short_trajectory_cannot_give_a_phasor(trap_model, main_drive) -> None:
    traj = integrate_trajectory(trap_model, main_drive)

    with pytest.raises(FitError):
        micromotion_phasor(traj, main_drive.omega_rf, min_periods=40)


def _steady_micromotion(model, drive, dt=None) -> float:
    """Integrated radial micromotion amplitude (m) for a phase-mismatched drive"""
    r0, v0 = steady_state_start(model, drive)
    traj = integrate_trajectory(model, drive, damping=2 * np.pi * 5e3, r0=r0, v0=v0, duration=60 * drive.period, dt=dt)
    return float(micromotion_phasor(traj, drive.omega_rf).amplitudes[1])


def test_micromotion_is_linear_in_the_phase_mismatch(trap_model, main_drive) -> None:
    single = _steady_micromotion(trap_model, main_drive.with_channel(RADIAL_Y, 50.0, phase=0.02))
    double = _steady_micromotion(trap_model, main_drive.with_channel(RADIAL_Y, 50.0, phase=0.04))

    assert double / single == pytest.approx(2.0, abs=0.02)


def test_micromotion_amplitude_is_robust_to_the_step_size(trap_model, main_drive) -> None:
    drive = main_drive.with_channel(RADIAL_Y, 50.0, phase=0.02)

    fine = _steady_micromotion(trap_model, drive, dt=drive.period / 300)
    coarse = _steady_micromotion(trap_model, drive, dt=drive.period / 150)

    assert abs(coarse / fine - 1.0) < 0.01


def test_phasor_of_a_pure_sine() -> None:
    omega, amplitude = 2 * np.pi * 20e6, 12e-9
    dt = 2 * np.pi / omega / 200
    t = dt * np.arange(200 * 40 + 1)
    positions = np.zeros((t.size, 3))
    positions[:, 2] = amplitude * np.sin(omega * t)

    phasor = micromotion_phasor(Trajectory(t0=0.0, dt=dt, positions=positions, velocities=np.zeros_like(positions)), omega)

    assert phasor.amplitudes[2] == pytest.approx(amplitude, rel=1e-9)
    assert phasor.phases[2] == pytest.approx(-np.pi / 2, abs=1e-9)
    assert phasor.amplitudes[0] == pytest.approx(0.0, abs=1e-20)


def test_in_phase_drive_started_at_the_null_stays_put(trap_model, main_drive) -> None:
    drive = main_drive.with_channel(RADIAL_Y, 50.0)
    null = find_rf_null(trap_model, drive)

    traj = integrate_trajectory(trap_model, drive, r0=null, duration=60 * drive.period)

    assert np.abs(traj.positions - null).max() < 1e-9
