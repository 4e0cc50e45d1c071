"""
Trap Model Service - analytic multipole model with superposed synchronous RF sources
"""
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize

from models.errors import (
    CalibrationError,
    ModelValidityError,
    NullSearchError,
    PhaseMismatchError,
    UnstableConfigurationError,
)
from models.fields import MultipoleBasis, MultipoleEntry
from models.fits import FitResult
from models.tables import ScanTable
from models.trap import (
    COMP_X,
    COMP_Y,
    INNER_LOWER,
    INNER_UPPER,
    OUTER_PAIR,
    RADIAL_X,
    RADIAL_Y,
    CalibrationReport,
    CalibrationTargets,
    DriveConfig,
    IonSpecies,
    SecularResult,
    StabilityParameters,
    TrapModel,
)
from services.fitkit import fit_line, fit_polynomial

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
IN_PHASE_TOLERANCE = 1e-9
NULL_FIELD_TOLERANCE = 1e-6  # V/m
MAX_NEWTON_ITERATIONS = 50
SHIFT_MATCH_TOLERANCE = 1e-9  # relative, on the refitted c1 and c2

_UM = 1e-6
_AXIS_NAMES = ("x", "y", "z")


# =============================================================================
# Field and pseudopotential
# =============================================================================

def _check_validity(model: TrapModel, r: np.ndarray):
    if np.linalg.norm(r) > model.validity_radius:
        raise ModelValidityError(
            f"position {np.round(r / _UM, 3).tolist()} um lies outside the "
            f"{model.validity_radius / _UM:.0f} um validity ball",
            r,
            model.validity_radius,
        )


def rf_linear_terms(model: TrapModel, drive: DriveConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Complex phasor field written as E(r) = E0 + A r"""
    e0 = np.zeros(3, dtype=complex)
    a = np.zeros((3, 3), dtype=complex)
    for label, phasor in drive.phasors().items():
        if phasor == 0:
            continue
        entry = model.entry(label)
        e0 -= phasor * entry.b
        a -= phasor * entry.Q
    return e0, a


def rf_phasor_field(model: TrapModel, drive: DriveConfig, r) -> np.ndarray:
    """
    Complex RF field amplitude at r (V/m); the physical field is Re[E exp(i Omega t)]

    Raises:
        ModelValidityError: r outside the validity ball
    """
    r = np.asarray(r, dtype=float)
    _check_validity(model, r)
    e0, a = rf_linear_terms(model, drive)
    return e0 + a @ r


def _pseudo_prefactor(ion: IonSpecies, omega: float) -> float:
    return ion.charge**2 / (4.0 * ion.mass * omega**2)


def pseudopotential(model: TrapModel, drive: DriveConfig, r) -> float:
    """Time-averaged potential q^2 |E|^2 / (4 m Omega^2), in eV"""
    field = rf_phasor_field(model, drive, r)
    energy = _pseudo_prefactor(model.ion, drive.omega_rf) * float(np.vdot(field, field).real)
    return energy / model.ion.charge


def _pseudo_quadratic_form(model: TrapModel, drive: DriveConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Hessian and gradient-at-origin of the pseudopotential energy (J)"""
    e0, a = rf_linear_terms(model, drive)
    scale = 2.0 * _pseudo_prefactor(model.ion, drive.omega_rf)
    return scale * np.real(a.conj().T @ a), scale * np.real(a.conj().T @ e0)


def _dc_quadratic_form(model: TrapModel, drive: DriveConfig) -> Tuple[np.ndarray, np.ndarray]:
    hessian = np.zeros((3, 3))
    gradient = np.zeros(3)
    for label, offset in drive.dc_offsets().items():
        entry = model.entry(label)
        hessian += model.ion.charge * offset * entry.Q
        gradient += model.ion.charge * offset * entry.b
    return hessian, gradient


def pseudopotential_minimum(model: TrapModel, drive: DriveConfig) -> np.ndarray:
    """Minimum of pseudopotential plus dc potential; defined for mismatched drives too"""
    h_rf, g_rf = _pseudo_quadratic_form(model, drive)
    h_dc, g_dc = _dc_quadratic_form(model, drive)
    position = np.linalg.lstsq(h_rf + h_dc, -(g_rf + g_dc), rcond=None)[0]
    _check_validity(model, position)
    return position


# =============================================================================
# RF null and secular motion
# =============================================================================

def reference_phase(drive: DriveConfig) -> float:
    """Phase of the strongest source; everything else is compared against it"""
    phasors = drive.phasors()
    if not phasors:
        return 0.0
    strongest = max(phasors, key=lambda label: abs(phasors[label]))
    return float(np.angle(phasors[strongest]))


def phase_mismatch_ratio(drive: DriveConfig) -> float:
    """Largest quadrature component relative to the largest amplitude"""
    phasors = np.array(list(drive.phasors().values()), dtype=complex)
    if phasors.size == 0 or np.abs(phasors).max() == 0:
        return 0.0
    rotated = phasors * np.exp(-1j * reference_phase(drive))
    return float(np.abs(rotated.imag).max() / np.abs(phasors).max())


def find_rf_null(
    model: TrapModel,
    drive: DriveConfig,
    guess: Sequence[float] = (0.0, 0.0, 0.0),
    tolerance: float = NULL_FIELD_TOLERANCE,
    max_iterations: int = MAX_NEWTON_ITERATIONS,
) -> np.ndarray:
    """
    Newton search for E(r) = 0 with in-phase sources

    Args:
        model: trap model
        drive: in-phase drive
        guess: start position (m), inside the validity ball
        tolerance: stop once |E| drops below this (V/m)

    Returns:
        Null position (m)

    Raises:
        PhaseMismatchError: sources are not in phase, no true null exists
        NullSearchError: iteration left the validity ball or did not converge
    """
    ratio = phase_mismatch_ratio(drive)
    if ratio > IN_PHASE_TOLERANCE:
        raise PhaseMismatchError(
            f"drive sources are out of phase (quadrature ratio {ratio:.3e}); there is no RF null. "
            "Use services.dynamics for the micromotion of a mismatched drive",
            imaginary_ratio=ratio,
        )

    r = np.asarray(guess, dtype=float).copy()
    _check_validity(model, r)
    e0, a = rf_linear_terms(model, drive)
    rotation = np.exp(-1j * reference_phase(drive))
    e0_real = np.real(e0 * rotation)
    jacobian = np.real(a * rotation)

    for iteration in range(max_iterations):
        field = e0_real + jacobian @ r
        if np.linalg.norm(field) < tolerance:
            logger.debug(f"RF null after {iteration} Newton steps: {np.round(r / _UM, 4).tolist()} um")
            return r
        try:
            r = r - np.linalg.solve(jacobian, field)
        except np.linalg.LinAlgError:
            raise NullSearchError("singular field Jacobian during null search", r) from None
        if not np.all(np.isfinite(r)) or np.linalg.norm(r) > model.validity_radius:
            raise NullSearchError("null search left the validity ball", r)

    if np.linalg.norm(e0_real + jacobian @ r) < tolerance:
        return r
    raise NullSearchError(f"null search did not converge in {max_iterations} iterations", r)


def equilibrium_position(model: TrapModel, drive: DriveConfig) -> np.ndarray:
    if drive.dc_offsets():
        return pseudopotential_minimum(model, drive)
    return find_rf_null(model, drive)


def secular_frequencies(model: TrapModel, drive: DriveConfig) -> SecularResult:
    """
    Secular frequencies from the Hessian of the total static potential at equilibrium

    Raises:
        PhaseMismatchError: drive not in phase
        UnstableConfigurationError: Hessian not positive definite
    """
    ratio = phase_mismatch_ratio(drive)
    if ratio > IN_PHASE_TOLERANCE:
        raise PhaseMismatchError("secular frequencies need an in-phase drive", imaginary_ratio=ratio)
    null = equilibrium_position(model, drive)

    h_rf, _ = _pseudo_quadratic_form(model, drive)
    h_dc, _ = _dc_quadratic_form(model, drive)
    hessian = h_rf + h_dc
    eigenvalues, eigenvectors = np.linalg.eigh(0.5 * (hessian + hessian.T))
    if eigenvalues.min() <= 0:
        raise UnstableConfigurationError(
            f"unstable configuration: Hessian eigenvalues {eigenvalues.tolist()} are not all positive"
        )
    frequencies = np.sqrt(eigenvalues / model.ion.mass) / (2.0 * np.pi)
    return SecularResult(frequencies=frequencies, axes=eigenvectors, null_position=null)


def stability_parameters(model: TrapModel, drive: DriveConfig) -> StabilityParameters:
    """Mathieu a and q per Cartesian axis, relative to the strongest source phase"""
    mass, charge, omega = model.ion.mass, model.ion.charge, drive.omega_rf
    ref = reference_phase(drive)
    rf_curvature = np.zeros((3, 3))
    for label, drive_entry in drive.channels.items():
        rf_curvature += drive_entry.amplitude * np.cos(drive_entry.phase - ref) * model.entry(label).Q
    dc_curvature, _ = _dc_quadratic_form(model, drive)
    a = 4.0 * np.diag(dc_curvature) / (mass * omega**2)
    q = 2.0 * charge * np.diag(rf_curvature) / (mass * omega**2)
    return StabilityParameters(a=a, q=q)


# =============================================================================
# Basis construction
# =============================================================================

def slope_per_strength(ion: IonSpecies, omega_rf: float) -> float:
    """Axial secular slope (Hz/V) per unit outer quadrupole strength (V/m^2)"""
    return ion.charge / (np.sqrt(2.0) * ion.mass * omega_rf) / (2.0 * np.pi)


def outer_pair_entry(kappa: float) -> MultipoleEntry:
    return MultipoleEntry(a0=0.0, b=np.zeros(3), Q=kappa * np.diag([-0.5, -0.5, 1.0]))


def radial_entry(axis: int, dipole: float, quadrupole: float) -> MultipoleEntry:
    """Electrode on a transverse axis: dipole along it, quadrupole elongated along it"""
    b = np.zeros(3)
    b[axis] = dipole
    shape = np.full(3, -0.5)
    shape[axis] = 1.0
    return MultipoleEntry(a0=0.0, b=b, Q=quadrupole * np.diag(shape))


def inner_entries(axial_dipole: float, solved: Optional[MultipoleBasis] = None) -> Dict[str, MultipoleEntry]:
    """Upper/lower inner electrodes, mirror images through z = 0"""
    q_upper = np.zeros((3, 3))
    if solved is not None and INNER_UPPER in solved and solved[INNER_UPPER].b[2] != 0:
        reference = solved[INNER_UPPER]
        q_upper = reference.Q * (axial_dipole / reference.b[2])
    return {
        INNER_UPPER: MultipoleEntry(a0=0.0, b=np.array([0.0, 0.0, axial_dipole]), Q=q_upper),
        INNER_LOWER: MultipoleEntry(a0=0.0, b=np.array([0.0, 0.0, -axial_dipole]), Q=q_upper),
    }


def _shift_curve(dipole_um: float, curvature: float, amplitudes: np.ndarray) -> np.ndarray:
    """Null displacement (um) for the outer quadrupole plus one radial electrode"""
    return -dipole_um * amplitudes / (1.0 + curvature * amplitudes)


def _solve_shift_parameters(linear: float, quadratic: float, amplitudes: np.ndarray) -> Tuple[float, float]:
    """Dipole (um/V) and curvature (1/V) whose quadratic refit reproduces the targets exactly"""
    target = np.array([linear, quadratic])

    def mismatch(p: np.ndarray) -> np.ndarray:
        fit = fit_polynomial(amplitudes, _shift_curve(p[0], p[1], amplitudes), 2, through_origin=True)
        return np.array([fit["c1"], fit["c2"]]) - target

    start = np.array([-linear, -quadratic / linear if linear else 0.0])
    solution = optimize.root(mismatch, start, method="hybr", tol=1e-14)
    # MINPACK flags "xtol too small" even at machine precision; judge by the residual
    relative = np.max(np.abs(mismatch(solution.x) / np.where(target == 0, 1.0, target)))
    if not np.isfinite(relative) or relative > SHIFT_MATCH_TOLERANCE:
        raise CalibrationError(
            f"radial shift polynomial could not be matched: {solution.message} (relative mismatch {relative:.2e})"
        )
    return float(solution.x[0]), float(solution.x[1])


# =============================================================================
# Calibration
# =============================================================================

def calibrate_model(
    targets: CalibrationTargets,
    ion: Optional[IonSpecies] = None,
    solved_basis: Optional[MultipoleBasis] = None,
    validity_radius: float = 1.0e-4,
) -> Tuple[TrapModel, CalibrationReport]:
    """
    Pin the analytic basis to measured slopes, shift polynomial and axial shift

    Args:
        targets: calibration numbers (see CalibrationTargets)
        ion: ion species, 40Ca+ by default
        solved_basis: optional field-solver basis supplying the inner-electrode quadrupole shape

    Returns:
        (calibrated TrapModel, CalibrationReport)

    Raises:
        CalibrationError: missing targets or non-closing shift polynomial
    """
    missing = targets.missing()
    if missing:
        raise CalibrationError(f"insufficient calibration targets: missing {missing}", missing)
    if targets.axial_weight < 0 or targets.radial_weight < 0 or targets.axial_weight + targets.radial_weight == 0:
        raise CalibrationError("slope weights must be non-negative and not both zero", ["axial_weight", "radial_weight"])

    ion = ion or IonSpecies()
    omega = targets.omega_rf
    v_ref = targets.reference_amplitude_v
    logger.info(f"🔧 Calibrating trap model at V_ref={v_ref:.0f} V, Omega/2pi={omega / 2 / np.pi / 1e6:.2f} MHz")

    # Outer quadrupole: weighted least squares over the two slopes (model forces axial = 2 x radial)
    per_kappa = slope_per_strength(ion, omega)
    s_axial = targets.axial_slope_khz_per_v * 1e3
    s_radial = targets.radial_slope_khz_per_v * 1e3
    w_a, w_r = targets.axial_weight, targets.radial_weight
    kappa = (w_a * s_axial + w_r * s_radial / 2.0) / (per_kappa * (w_a + w_r / 4.0))
    axial_model = per_kappa * kappa / 1e3
    radial_model = axial_model / 2.0

    # Radial electrodes: dipole and curvature pinned by the two polynomial coefficients
    closure = np.linspace(0.0, v_ref, targets.closure_points)
    dipole_um, curvature = _solve_shift_parameters(
        targets.shift_linear_um_per_v, targets.shift_quadratic_um_per_v2, closure
    )
    half_curvature = kappa * v_ref / 2.0
    radial_dipole = -dipole_um * _UM * half_curvature
    radial_quadrupole = -curvature * half_curvature

    axial_dipole = targets.axial_shift_um_per_v * _UM * kappa * v_ref

    basis: MultipoleBasis = {
        OUTER_PAIR: outer_pair_entry(kappa),
        RADIAL_Y: radial_entry(1, radial_dipole, radial_quadrupole),
        RADIAL_X: radial_entry(0, radial_dipole, radial_quadrupole),
        COMP_Y: radial_entry(1, -radial_dipole, radial_quadrupole),
        COMP_X: radial_entry(0, -radial_dipole, radial_quadrupole),
    }
    basis.update(inner_entries(axial_dipole, solved_basis))
    model = TrapModel(basis=basis, ion=ion, validity_radius=validity_radius)

    drive = DriveConfig.main_only(omega, v_ref)
    _, closure_fit = minimum_vs_amplitude_scan(model, drive, RADIAL_Y, closure)

    gain = None
    if targets.displacement_gradient_um_per_vpp is not None:
        gain = amplifier_gain_for_gradient(
            model, drive, targets.generator_settings_vpp, targets.displacement_gradient_um_per_vpp
        )

    report = CalibrationReport(
        quadrupole_strength=float(kappa),
        axial_weight=w_a,
        radial_weight=w_r,
        axial_slope_model_khz_per_v=float(axial_model),
        radial_slope_model_khz_per_v=float(radial_model),
        axial_slope_residual_khz_per_v=float(axial_model - targets.axial_slope_khz_per_v),
        radial_slope_residual_khz_per_v=float(radial_model - targets.radial_slope_khz_per_v),
        shift_dipole_um_per_v=dipole_um,
        shift_curvature_per_v=curvature,
        radial_dipole=float(radial_dipole),
        radial_quadrupole=float(radial_quadrupole),
        axial_dipole=float(axial_dipole),
        amplifier_gain=gain,
        closure_amplitudes_v=tuple(float(v) for v in closure),
        closure_coefficients=(closure_fit["c2"], closure_fit["c1"]),
    )
    logger.info(
        f"✅ Calibration done: kappa={kappa:.4e} V/m^2, slopes axial={axial_model:.3f} "
        f"radial={radial_model:.3f} kHz/V (radial residual {report.radial_slope_residual_khz_per_v:+.3f})"
    )
    return model, report


def null_displacement_for_settings(
    model: TrapModel,
    drive: DriveConfig,
    settings_vpp: Iterable[float],
    gain: float,
    electrode: str = RADIAL_Y,
) -> np.ndarray:
    """Null positions (m) for signed generator settings; negative settings flip the phase by pi"""
    nulls = [find_rf_null(model, drive.with_signed_channel(electrode, gain * s)) for s in settings_vpp]
    return np.array(nulls)


def amplifier_gain_for_gradient(
    model: TrapModel,
    drive: DriveConfig,
    settings_vpp: Sequence[float],
    gradient_um_per_vpp: float,
    electrode: str = RADIAL_Y,
) -> float:
    """Generator-to-electrode gain (V per Vpp) whose null-vs-setting slope matches gradient"""
    settings_vpp = np.asarray(settings_vpp, dtype=float)
    axis = int(np.argmax(np.abs(model.entry(electrode).b)))

    def slope_error(gain: float) -> float:
        shifts = null_displacement_for_settings(model, drive, settings_vpp, gain, electrode)[:, axis] / _UM
        return abs(fit_line(settings_vpp, shifts)["c1"]) - gradient_um_per_vpp

    gain = optimize.brentq(slope_error, 1e-3, 1e3, xtol=1e-12)
    logger.info(f"Amplifier gain {gain:.3f} V/Vpp closes the {gradient_um_per_vpp} um/Vpp gradient")
    return float(gain)


# =============================================================================
# Scans and persistence
# =============================================================================

def minimum_vs_amplitude_scan(
    model: TrapModel,
    drive: DriveConfig,
    electrode: str,
    amplitudes: Sequence[float],
) -> Tuple[ScanTable, FitResult]:
    """
    RF-null position versus the amplitude on one electrode

    Returns:
        ScanTable (amplitude_V, x_um, y_um, z_um) and a through-origin quadratic fit
        of the displacement along the electrode's dipole axis
    """
    amplitudes = np.asarray(amplitudes, dtype=float)
    nulls = np.array([find_rf_null(model, drive.with_channel(electrode, v)) for v in amplitudes]).reshape(-1, 3)
    axis = int(np.argmax(np.abs(model.entry(electrode).b)))
    table = ScanTable(
        independent={"amplitude_V": amplitudes},
        dependent={f"{name}_um": nulls[:, k] / _UM for k, name in enumerate(_AXIS_NAMES)},
        metadata={"electrode": electrode, "fit_axis": _AXIS_NAMES[axis]},
    )
    fit = fit_polynomial(amplitudes, nulls[:, axis] / _UM, 2, through_origin=True)
    return table, fit


def save_model(model: TrapModel, path) -> Path:
    path = Path(path)
    payload = {
        "format_version": MODEL_FORMAT_VERSION,
        "ion": {"mass": model.ion.mass, "charge": model.ion.charge},
        "validity_radius": model.validity_radius,
        "basis": {label: entry.to_dict() for label, entry in sorted(model.basis.items())},
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


def load_model(path) -> TrapModel:
    payload = json.loads(Path(path).read_text())
    version = payload.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise CalibrationError(f"unsupported model format version {version}", ["format_version"])
    basis = {label: MultipoleEntry.from_dict(data) for label, data in payload["basis"].items()}
    return TrapModel(basis=basis, ion=IonSpecies(**payload["ion"]), validity_radius=payload["validity_radius"])
