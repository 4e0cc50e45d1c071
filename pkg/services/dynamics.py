"""
Dynamics Service - time-dependent ion motion under superposed RF sources
"""
import logging
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import signal

from models.errors import ConfigurationError, FitError, TrajectoryEscapeError
from models.motion import MicromotionPhasor, MismatchParams, Trajectory
from models.trap import OUTER_PAIR, DriveConfig, IonSpecies, TrapModel
from services.trap_model import (
    find_rf_null,
    pseudopotential_minimum,
    rf_linear_terms,
    stability_parameters,
)

logger = logging.getLogger(__name__)

SeedLike = Union[int, Sequence[int], np.random.SeedSequence, None]

STEPS_PER_PERIOD = 200
MIN_STEPS_PER_PERIOD = 100
MIN_PERIODS = 50
DISCARD_FRACTION = 0.3
MIN_ANALYSIS_PERIODS = 20
_BLOCK = 4096


def default_dt(drive: DriveConfig) -> float:
    return drive.period / STEPS_PER_PERIOD


def _dc_terms(model: TrapModel, drive: DriveConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Static field written as E_dc(r) = e_dc + A_dc r"""
    e_dc = np.zeros(3)
    a_dc = np.zeros((3, 3))
    for label, offset in drive.dc_offsets().items():
        entry = model.entry(label)
        e_dc -= offset * entry.b
        a_dc -= offset * entry.Q
    return e_dc, a_dc


def _step_maps(
    times: np.ndarray, dt: float, omega: float, qm: float, damping: float,
    e0: np.ndarray, a: np.ndarray, e_dc: np.ndarray, a_dc: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Affine kick-drift-kick maps for a block of steps starting at `times`

    Both kicks use the force at the step midpoint; damping enters the kicks.
    Returns (M, c) with state' = M @ state + c for state = (x, v).
    """
    phase = np.exp(1j * omega * (times + 0.5 * dt))
    g = qm * (np.real(np.multiply.outer(phase, e0)) + e_dc)  # (n, 3)
    k = qm * (np.real(np.multiply.outer(phase, a)) + a_dc)  # (n, 3, 3)
    n = times.size
    eye = np.broadcast_to(np.eye(3), (n, 3, 3))
    half = 0.5 * dt
    shrink = 1.0 - damping * half

    # v1 = shrink v + half (g + K x);  x' = x + dt v1;  v' = shrink v1 + half (g + K x')
    v1_x = half * k
    v1_v = shrink * eye
    v1_c = half * g
    x_x = eye + dt * v1_x
    x_v = dt * v1_v
    x_c = dt * v1_c
    v_x = shrink * v1_x + half * k @ x_x
    v_v = shrink * v1_v + half * k @ x_v
    v_c = shrink * v1_c + half * (g + np.einsum("nij,nj->ni", k, x_c))

    maps = np.zeros((n, 6, 6))
    maps[:, :3, :3] = x_x
    maps[:, :3, 3:] = x_v
    maps[:, 3:, :3] = v_x
    maps[:, 3:, 3:] = v_v
    offsets = np.concatenate([x_c, v_c], axis=1)
    return maps, offsets


def integrate_trajectory(
    model: TrapModel,
    drive: DriveConfig,
    ion: Optional[IonSpecies] = None,
    damping: float = 0.0,
    r0: Sequence[float] = (0.0, 0.0, 0.0),
    v0: Sequence[float] = (0.0, 0.0, 0.0),
    duration: Optional[float] = None,
    dt: Optional[float] = None,
    t0: float = 0.0,
    kick_sigma: float = 0.0,
    seed: SeedLike = None,
) -> Trajectory:
    """
    Fixed-step integration of m r'' = q E(r, t) - m damping r'

    Args:
        model: trap model supplying the field of every electrode
        drive: RF amplitudes, phases and dc offsets
        ion: ion species, the model's ion by default
        damping: viscous cooling rate (1/s); amplitudes decay at damping/2
        r0, v0: initial state (m, m/s)
        duration: seconds, at least 50 RF periods (default 50 periods)
        dt: step, at most one hundredth of an RF period (default 1/200)
        kick_sigma: white velocity noise density (m/s/sqrt(s)); needs a seed

    Returns:
        Trajectory sampled at every step

    Raises:
        ConfigurationError: step or duration preconditions violated
        TrajectoryEscapeError: ion left the validity ball
    """
    ion = ion or model.ion
    period = drive.period
    dt = default_dt(drive) if dt is None else dt
    duration = MIN_PERIODS * period if duration is None else duration
    if dt <= 0 or dt > period / MIN_STEPS_PER_PERIOD * (1.0 + 1e-12):
        raise ConfigurationError(f"dt={dt:.3e} s exceeds T_rf/{MIN_STEPS_PER_PERIOD}", ["dt"])
    if duration < MIN_PERIODS * period * (1.0 - 1e-12):
        raise ConfigurationError(f"duration must cover at least {MIN_PERIODS} RF periods", ["duration"])
    if damping < 0:
        raise ConfigurationError("damping must be non-negative", ["damping"])

    n_steps = int(round(duration / dt))
    e0, a = rf_linear_terms(model, drive)
    e_dc, a_dc = _dc_terms(model, drive)
    qm = ion.charge / ion.mass
    rng = np.random.default_rng(seed) if kick_sigma > 0 else None

    states = np.empty((n_steps + 1, 6))
    states[0, :3] = r0
    states[0, 3:] = v0
    state = states[0].copy()
    logger.debug(f"Integrating {n_steps} steps of {dt:.3e} s")

    for start in range(0, n_steps, _BLOCK):
        count = min(_BLOCK, n_steps - start)
        times = t0 + dt * np.arange(start, start + count)
        maps, offsets = _step_maps(times, dt, drive.omega_rf, qm, damping, e0, a, e_dc, a_dc)
        kicks = kick_sigma * np.sqrt(dt) * rng.standard_normal((count, 3)) if rng is not None else None
        for k in range(count):
            state = maps[k] @ state + offsets[k]
            if kicks is not None:
                state[3:] += kicks[k]
            states[start + k + 1] = state

        radii = np.linalg.norm(states[start + 1:start + count + 1, :3], axis=1)
        outside = np.flatnonzero(~(radii <= model.validity_radius))
        if outside.size:
            escape_time = t0 + dt * (start + 1 + outside[0])
            raise TrajectoryEscapeError(f"ion left the validity ball at t={escape_time:.4e} s", escape_time)

    return Trajectory(t0=t0, dt=dt, positions=states[:, :3], velocities=states[:, 3:])


def predicted_micromotion(model: TrapModel, drive: DriveConfig, ion: Optional[IonSpecies] = None) -> MicromotionPhasor:
    """First-order excess micromotion from the residual RF field at the equilibrium"""
    ion = ion or model.ion
    r_eq = pseudopotential_minimum(model, drive)
    e0, a = rf_linear_terms(model, drive)
    response = -ion.charge * (e0 + a @ r_eq) / (ion.mass * drive.omega_rf**2)
    return MicromotionPhasor(amplitudes=np.abs(response), phases=np.angle(response), offsets=r_eq)


def steady_state_start(
    model: TrapModel, drive: DriveConfig, ion: Optional[IonSpecies] = None, t0: float = 0.0
) -> Tuple[np.ndarray, np.ndarray]:
    """Initial position and velocity on the predicted micromotion orbit"""
    ion = ion or model.ion
    r_eq = pseudopotential_minimum(model, drive)
    e0, a = rf_linear_terms(model, drive)
    field = (e0 + a @ r_eq) * np.exp(1j * drive.omega_rf * t0)
    r = r_eq - ion.charge * np.real(field) / (ion.mass * drive.omega_rf**2)
    v = ion.charge * np.imag(field) / (ion.mass * drive.omega_rf)
    return r, v


def micromotion_phasor(
    traj: Trajectory,
    omega: float,
    discard_fraction: float = DISCARD_FRACTION,
    min_periods: int = MIN_ANALYSIS_PERIODS,
) -> MicromotionPhasor:
    """
    Project each coordinate onto {cos wt, sin wt, 1} over whole periods

    The first `discard_fraction` of the trajectory is dropped as transient.

    Raises:
        FitError: fewer than `min_periods` periods remain
    """
    times = traj.times
    first = int(np.ceil(discard_fraction * (len(traj) - 1)))
    period = 2.0 * np.pi / omega
    n_periods = int(np.floor((times[-1] - times[first]) / period + 1e-9))
    if n_periods < min_periods:
        raise FitError(f"trajectory too short: {n_periods} whole periods after the transient, need {min_periods}")

    n_samples = int(round(n_periods * period / traj.dt))
    t = times[first:first + n_samples]
    design = np.column_stack([np.cos(omega * t), np.sin(omega * t), np.ones_like(t)])
    coeffs, *_ = np.linalg.lstsq(design, traj.positions[first:first + n_samples], rcond=None)
    c, s, offsets = coeffs
    return MicromotionPhasor(amplitudes=np.hypot(c, s), phases=np.arctan2(-s, c), offsets=offsets)


def mismatch_micromotion_prediction(p: MismatchParams) -> float:
    """Micromotion amplitude q R alpha |delta| / 4 for a phase-mismatched source (m)"""
    return 0.25 * p.q * p.R * p.alpha * abs(p.delta)


def mismatch_params(
    model: TrapModel,
    drive: DriveConfig,
    electrode: str,
    reference: str = OUTER_PAIR,
    radius: float = 1.75e-4,
) -> MismatchParams:
    """
    Mismatch parameters of `electrode` relative to `reference`

    q is the Mathieu q of the in-phase drive along the micromotion axis and
    alpha = 2 V |b_eff| / (|C_kk| R), with b_eff the electrode's field gradient
    at the null and C the in-phase RF curvature. With these definitions the
    first-order formula equals the uniform-force response q V delta |b_eff| / (m Omega^2).
    """
    aux = drive.channels[electrode]
    delta = float(np.angle(np.exp(1j * (aux.phase - drive.channels[reference].phase))))
    in_phase = drive.with_channel(electrode, aux.amplitude, drive.channels[reference].phase, aux.dc)

    null = find_rf_null(model, in_phase)
    entry = model.entry(electrode)
    gradient = entry.b + entry.Q @ null
    axis = int(np.argmax(np.abs(gradient)))

    curvature = sum(
        d.amplitude * np.cos(d.phase - drive.channels[reference].phase) * model.entry(label).Q[axis, axis]
        for label, d in in_phase.channels.items()
    )
    q = abs(stability_parameters(model, in_phase).q[axis])
    alpha = 2.0 * abs(aux.amplitude) * abs(gradient[axis]) / (abs(curvature) * radius)
    return MismatchParams(q=q, R=radius, alpha=alpha, delta=delta, omega=drive.omega_rf)


def secular_spectrum_peak(traj: Trajectory, axis: int, band: Optional[Tuple[float, float]] = None) -> float:
    """Frequency (Hz) of the strongest PSD peak in band, Hann window with parabolic refinement"""
    x = traj.positions[:, axis]
    freqs, power = signal.periodogram(x - x.mean(), fs=1.0 / traj.dt, window="hann")
    lo, hi = band if band is not None else (freqs[1], freqs[-1])
    candidates = np.flatnonzero((freqs >= lo) & (freqs <= hi))
    if candidates.size == 0:
        raise FitError(f"no spectral bins inside band {band}")
    k = candidates[np.argmax(power[candidates])]
    if 0 < k < freqs.size - 1:
        left, mid, right = power[k - 1], power[k], power[k + 1]
        curvature = left - 2.0 * mid + right
        if curvature < 0:
            return float(freqs[k] + 0.5 * (left - right) / curvature * (freqs[1] - freqs[0]))
    return float(freqs[k])
