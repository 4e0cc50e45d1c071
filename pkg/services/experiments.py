"""
Experiments Service - seeded end-to-end virtual experiments
"""
import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config.settings import Settings, config_hash
from models.errors import ConfigurationError, FitError
from models.fields import MultipoleBasis
from models.motion import MicromotionPhasor
from models.optics import CavityMode
from models.tables import ExperimentResult, ScanTable
from models.trap import COMP_X, COMP_Y, RADIAL_Y, CalibrationReport, DriveConfig, SecularResult, TrapModel
from services.dynamics import (
    integrate_trajectory,
    micromotion_phasor,
    mismatch_micromotion_prediction,
    mismatch_params,
    predicted_micromotion,
    secular_spectrum_peak,
    steady_state_start,
)
from services.field_solver import solve_basis_set
from services.fitkit import (
    fit_fixed_frequency_sinusoid,
    fit_gaussian_1d,
    fit_gaussian_spot_2d,
    fit_line,
    fit_pseudo_voigt,
    fit_standing_wave,
    pseudo_voigt_area,
    pseudo_voigt_profile,
    tch_mixing,
)
from services.optics import (
    cavity_emission_rate,
    cavity_mode_from_geometry,
    fluorescence_rate,
    fold_arrivals,
    mean_mode_intensity,
    mode_phase,
    nearest_antinode,
    render_ion_image,
    sample_photon_arrivals,
)
from services.servo import bode_table, compose_loop_filter, loop_margins, measure_sensitivity, simulate_lock
from services.trap_model import (
    calibrate_model,
    equilibrium_position,
    find_rf_null,
    minimum_vs_amplitude_scan,
    secular_frequencies,
)

logger = logging.getLogger(__name__)

PHASE_CHANNELS = ("radial", "axial")
TRAJECTORY_PERIODS = 1000
_UM = 1e-6
_NM = 1e-9
_MHZ = 2.0 * np.pi * 1e6


def experiment_id(name: str) -> int:
    """Stable integer key of an experiment name for RNG stream derivation"""
    return zlib.crc32(name.encode("utf-8"))


def _periodic_motion(phasor: MicromotionPhasor, omega: float) -> Tuple[Callable, Callable]:
    """Position and velocity functions of time for a pure micromotion orbit"""
    def position(t):
        arg = omega * np.asarray(t, dtype=float)[..., None] + phasor.phases
        return phasor.offsets + phasor.amplitudes * np.cos(arg)

    def velocity(t):
        arg = omega * np.asarray(t, dtype=float)[..., None] + phasor.phases
        return -omega * phasor.amplitudes * np.sin(arg)

    return position, velocity


def _expected_histogram(rate_fn: Callable, omega: float, n_bins: int, integration: float, oversample: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    """Noise-free RF-phase histogram of a periodic rate over `integration` seconds"""
    edges = np.linspace(0.0, 2.0 * np.pi, n_bins + 1)
    fine = (np.arange(n_bins * oversample) + 0.5) / (n_bins * oversample) * 2.0 * np.pi
    rates = rate_fn(fine / omega).reshape(n_bins, oversample).mean(axis=1)
    return 0.5 * (edges[:-1] + edges[1:]), rates * integration / n_bins


def _axis_frequencies(sec: SecularResult) -> Dict[str, float]:
    """Secular frequency (Hz) of the principal axis closest to each Cartesian axis"""
    return {name: float(sec.frequencies[int(np.argmax(np.abs(sec.axes[k, :])))]) for k, name in enumerate("xyz")}


def _finite_errors(errors) -> np.ndarray:
    return np.nan_to_num(np.asarray(errors, dtype=float), nan=0.0, posinf=0.0, neginf=0.0)


def _fixed_shape_area(x: np.ndarray, y: np.ndarray, center: float, sigma: float, hwhm: float) -> Tuple[float, float]:
    """Area (and error) of a line with known shape: linear fit of amplitude and offset"""
    profile = pseudo_voigt_profile(x, center, sigma, hwhm)
    design = np.column_stack([profile, np.ones_like(x)])
    coeffs, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coeffs
    dof = max(x.size - 2, 1)
    cov = np.linalg.pinv(design.T @ design) * float(resid @ resid) / dof
    unit = pseudo_voigt_area(1.0, sigma, hwhm)
    return float(coeffs[0] * unit), float(np.sqrt(max(cov[0, 0], 0.0)) * abs(unit))


class ExperimentRunner:
    """
    Runs virtual experiments against one validated configuration

    Every scan point draws from its own RNG stream keyed by
    (master_seed, experiment id, point index), so results do not depend on
    the order or the thread that evaluated the point.
    """

    def __init__(self, settings: Settings, workers: Optional[int] = None):
        self.settings = settings
        self.workers = workers or settings.workers
        self.config_hash = config_hash(settings)
        self._calibration: Optional[Tuple[TrapModel, CalibrationReport]] = None
        logger.info(f"🔧 Experiment runner ready (seed {settings.master_seed}, config {self.config_hash[:12]})")

    # =========================================================================
    # Plumbing
    # =========================================================================

    def point_seed(self, experiment: str, index: int) -> List[int]:
        return [self.settings.master_seed, experiment_id(experiment), int(index)]

    def metadata(self, experiment: str, **extra) -> Dict[str, Any]:
        meta = {"experiment": experiment, "master_seed": self.settings.master_seed, "config_hash": self.config_hash}
        meta.update(extra)
        return meta

    def map_points(self, fn: Callable[[int, Any], Any], items: Sequence[Any]) -> List[Any]:
        """fn(index, item) over items, optionally threaded; results in index order"""
        indexed = list(enumerate(items))
        if self.workers <= 1 or len(indexed) <= 1:
            return [fn(k, item) for k, item in indexed]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(lambda pair: fn(*pair), indexed))

    @property
    def omega_rf(self) -> float:
        return self.settings.drive.omega_rf

    def base_drive(self, v_main: Optional[float] = None) -> DriveConfig:
        """Main RF drive with the configured compensation offsets applied"""
        section = self.settings.drive
        drive = DriveConfig.main_only(self.omega_rf, section.v_main_v if v_main is None else v_main)
        if section.comp_x_dc_v:
            drive = drive.with_channel(COMP_X, 0.0, 0.0, section.comp_x_dc_v)
        if section.comp_y_dc_v:
            drive = drive.with_channel(COMP_Y, 0.0, 0.0, section.comp_y_dc_v)
        return drive

    def cavity_mode(self, antinode_offset: Optional[float] = None) -> CavityMode:
        cavity = self.settings.cavity
        return cavity_mode_from_geometry(
            length=cavity.length_um * _UM,
            roc_upper=cavity.roc_upper_um * _UM,
            roc_lower=cavity.roc_lower_um * _UM,
            wavelength=cavity.wavelength_nm * _NM,
            antinode_offset=cavity.antinode_offset_nm * _NM if antinode_offset is None else antinode_offset,
            axis_offset=cavity.axis_offset,
            finesse=cavity.finesse,
        )

    # =========================================================================
    # Field solving and calibration
    # =========================================================================

    def solve_fields(self) -> Tuple[ExperimentResult, MultipoleBasis]:
        """Solve the axisymmetric electrode bases and extract their multipoles"""
        trap = self.settings.trap
        fits, fields = solve_basis_set(
            trap.to_geometry(), trap.grid_spacing_um * _UM, trap.solver_tolerance, trap.fit_radius_um * _UM
        )
        labels = list(fits)
        table = ScanTable(
            independent={"electrode_index": np.arange(len(labels))},
            dependent={
                "a0_V": [fits[k].entry.a0 for k in labels],
                "b_z_V_per_m": [fits[k].entry.b[2] for k in labels],
                "Q_rr_V_per_m2": [fits[k].entry.Q[0, 0] for k in labels],
                "Q_zz_V_per_m2": [fits[k].entry.Q[2, 2] for k in labels],
                "residual_rms_V": [fits[k].residual_rms for k in labels],
                "trace_ratio": [fits[k].trace_ratio for k in labels],
                "node_count": [fits[k].node_count for k in labels],
            },
            metadata=self.metadata("solve_fields", electrodes=labels, grid_spacing_um=trap.grid_spacing_um),
        )
        basis = {label: fit.entry for label, fit in fits.items()}
        summary = {
            "basis": {label: entry.to_dict() for label, entry in basis.items()},
            "higher_order": {label: fit.higher_order for label, fit in fits.items()},
        }
        result = ExperimentResult(name="solve_fields", table=table, summary=summary, artifacts=dict(fields))
        return result, basis

    @property
    def calibrated(self) -> Tuple[TrapModel, CalibrationReport]:
        if self._calibration is None:
            self._calibration = self._calibrate()
        return self._calibration

    def _calibrate(self) -> Tuple[TrapModel, CalibrationReport]:
        section = self.settings.calibration
        solved = None
        if section.use_solved_basis:
            _, solved = self.solve_fields()
        targets = section.to_targets(self.omega_rf, self.settings.scan.displacement_generator_vpp)
        return calibrate_model(
            targets, solved_basis=solved, validity_radius=self.settings.trap.validity_radius_um * _UM
        )

    def calibrate(self) -> ExperimentResult:
        model, report = self.calibrated
        closure = np.asarray(report.closure_amplitudes_v)
        table, fit = minimum_vs_amplitude_scan(
            model, DriveConfig.main_only(self.omega_rf, self.settings.calibration.reference_amplitude_v), RADIAL_Y, closure
        )
        table.metadata.update(self.metadata("calibrate"))
        return ExperimentResult(name="calibrate", table=table, fits={"closure": fit}, summary=report.to_dict())

    @property
    def amplifier_gain(self) -> float:
        """Generator-to-electrode gain (V per Vpp): configured, else from calibration"""
        configured = self.settings.drive.amplifier_gain_v_per_vpp
        if configured is not None:
            return configured
        gain = self.calibrated[1].amplifier_gain
        if gain is None:
            raise ConfigurationError(
                "no amplifier gain: set drive.amplifier_gain_v_per_vpp or calibration.displacement_gradient_um_per_vpp",
                ["drive.amplifier_gain_v_per_vpp", "calibration.displacement_gradient_um_per_vpp"],
            )
        return gain

    # =========================================================================
    # Trap scans
    # =========================================================================

    def run_minimum_scan(self) -> ExperimentResult:
        """Pseudopotential minimum versus amplitude on one radial electrode"""
        model, _ = self.calibrated
        scan = self.settings.scan
        table, fit = minimum_vs_amplitude_scan(model, self.base_drive(), scan.minimum_electrode, scan.minimum_amplitudes_v)
        table.metadata.update(self.metadata("minimum_scan"))
        axis = table.metadata["fit_axis"]
        shifts = table.column(f"{axis}_um")
        summary = {
            "quadratic_um_per_v2": fit["c2"],
            "linear_um_per_v": fit["c1"],
            "max_displacement_um": float(np.max(np.abs(shifts))),
        }
        logger.info(f"📊 Minimum scan: c2={fit['c2']:.4e} um/V^2, c1={fit['c1']:.4e} um/V")
        return ExperimentResult(name="minimum_scan", table=table, fits={"polynomial": fit}, summary=summary)

    def _trajectory_secular_check(self, model: TrapModel, drive: DriveConfig, expected: Dict[str, float]) -> Dict[str, float]:
        """Secular peaks of a free (undamped) trajectory started slightly off the null"""
        start = equilibrium_position(model, drive) + np.full(3, 0.5 * _UM)
        traj = integrate_trajectory(model, drive, r0=start, duration=TRAJECTORY_PERIODS * drive.period)
        peaks = {}
        for axis, name in enumerate("xyz"):
            f_model = expected[name]
            peaks[name] = secular_spectrum_peak(traj, axis, (0.75 * f_model, 1.25 * f_model))
        return peaks

    def run_secular_slope_scan(self) -> ExperimentResult:
        """Secular frequencies across main-drive amplitudes with through-origin slope fits"""
        model, report = self.calibrated
        amplitudes = np.asarray(self.settings.scan.secular_amplitudes_v, dtype=float)

        def point(_: int, v_main: float):
            sec = secular_frequencies(model, self.base_drive(v_main))
            radial = sorted(sec.radial)
            return sec.axial / 1e3, radial[0] / 1e3, radial[1] / 1e3

        rows = np.array(self.map_points(point, amplitudes))
        table = ScanTable(
            independent={"amplitude_V": amplitudes},
            dependent={"axial_kHz": rows[:, 0], "radial_1_kHz": rows[:, 1], "radial_2_kHz": rows[:, 2]},
            metadata=self.metadata("secular_scan"),
        )
        fits = {
            "axial": fit_line(amplitudes, rows[:, 0], through_origin=True),
            "radial": fit_line(amplitudes, rows[:, 1], through_origin=True),
        }
        ratio_axial = rows[:, 0] / amplitudes
        ratio_radial = rows[:, 1] / amplitudes
        summary = {
            "axial_slope_khz_per_v": fits["axial"]["c1"],
            "radial_slope_khz_per_v": fits["radial"]["c1"],
            "max_ratio_deviation": float(max(
                np.max(np.abs(ratio_axial / fits["axial"]["c1"] - 1.0)),
                np.max(np.abs(ratio_radial / fits["radial"]["c1"] - 1.0)),
            )),
            "calibration_radial_residual_khz_per_v": report.radial_slope_residual_khz_per_v,
        }

        if self.settings.scan.secular_trajectory_check:
            v_top = float(amplitudes.max())
            drive = self.base_drive(v_top)
            expected = _axis_frequencies(secular_frequencies(model, drive))
            peaks = self._trajectory_secular_check(model, drive, expected)
            summary["trajectory_check"] = {
                "amplitude_V": v_top,
                "model_hz": expected,
                "trajectory_hz": peaks,
                "relative_error": {k: peaks[k] / expected[k] - 1.0 for k in peaks},
            }
        logger.info(
            f"📊 Secular slopes: axial {summary['axial_slope_khz_per_v']:.4f}, "
            f"radial {summary['radial_slope_khz_per_v']:.4f} kHz/V"
        )
        return ExperimentResult(name="secular_scan", table=table, fits=fits, summary=summary)

    def run_trajectory(self) -> ExperimentResult:
        """Free trajectory at the configured drive plus its secular spectrum"""
        model, _ = self.calibrated
        drive = self.base_drive()
        expected = _axis_frequencies(secular_frequencies(model, drive))
        start = equilibrium_position(model, drive) + np.full(3, 0.5 * _UM)
        traj = integrate_trajectory(
            model, drive, damping=self.settings.drive.damping, r0=start,
            duration=TRAJECTORY_PERIODS * drive.period,
        )
        phasor = micromotion_phasor(traj, drive.omega_rf)
        peaks = [secular_spectrum_peak(traj, k, (0.75 * expected[n], 1.25 * expected[n])) for k, n in enumerate("xyz")]
        table = ScanTable(
            independent={"axis_index": [0, 1, 2]},
            dependent={
                "model_secular_Hz": [expected[n] for n in "xyz"],
                "trajectory_secular_Hz": peaks,
                "micromotion_amplitude_nm": phasor.amplitudes / _NM,
                "micromotion_phase_rad": phasor.phases,
            },
            metadata=self.metadata("trajectory", v_main_v=self.settings.drive.v_main_v),
        )
        return ExperimentResult(name="trajectory", table=table, artifacts={"trajectory": traj})

    # =========================================================================
    # Phase-mismatch micromotion
    # =========================================================================

    def _phase_drive(self, channel: str, delta: float) -> DriveConfig:
        scan = self.settings.scan
        if channel == "radial":
            return self.base_drive().with_channel(RADIAL_Y, scan.phase_radial_amplitude_v, delta)
        return self.base_drive().differential_inner(scan.phase_axial_differential_v, delta)

    def _phase_rate(self, channel: str, phasor: MicromotionPhasor, mode: Optional[CavityMode]) -> Tuple[Callable, float]:
        """Detected rate of a micromotion orbit and an envelope that bounds it"""
        position, velocity = _periodic_motion(phasor, self.omega_rf)
        if channel == "radial":
            laser = self.settings.laser.to_laser()
            cap = laser.efficiency * 0.5 * laser.linewidth * laser.saturation / (1.0 + laser.saturation)
            return (lambda t: fluorescence_rate(laser, velocity(t))), cap
        emission = self.settings.detection.to_emission()
        cap = emission.background_rate + emission.peak_rate
        return (lambda t: cavity_emission_rate(mode, position(t), 0.0, emission)), cap

    def _gradient_mode(self, z_ion: float) -> CavityMode:
        """Cavity mode shifted so the ion sits at the steepest slope, mode phase pi/4"""
        mode = self.cavity_mode(antinode_offset=0.0)
        shift = np.mod(np.pi / 4.0 - float(mode_phase(mode, z_ion)), np.pi)
        return self.cavity_mode(antinode_offset=shift / mode.wavenumber)

    def run_phase_scan(self, channel: str = "radial") -> ExperimentResult:
        """
        Micromotion amplitude versus the phase of an additional RF source

        Args:
            channel: "radial" (fluorescence, radial electrode) or "axial"
                (cavity emission, differential inner drive at the steepest mode slope)

        Returns:
            ExperimentResult with trajectory-derived and photon-correlation amplitudes
        """
        if channel not in PHASE_CHANNELS:
            raise ConfigurationError(f"unknown phase-scan channel '{channel}'", ["channel"])
        name = f"phase_scan_{channel}"
        model, _ = self.calibrated
        scan, detection = self.settings.scan, self.settings.detection
        deltas = np.asarray(scan.phase_deltas_rad, dtype=float)
        axis = 1 if channel == "radial" else 2
        omega = self.omega_rf
        logger.info(f"🚀 Phase scan ({channel}): {deltas.size} phases over [{deltas.min():+.3f}, {deltas.max():+.3f}] rad")

        mode = None
        if channel == "axial":
            mode = self._gradient_mode(float(find_rf_null(model, self._phase_drive(channel, 0.0))[2]))

        # Polarity reference: noise-free first-order prediction at the largest |delta|
        ref_delta = float(deltas[np.argmax(np.abs(deltas))])
        ref_phasor = predicted_micromotion(model, self._phase_drive(channel, ref_delta))
        ref_phase = float(ref_phasor.phases[axis]) + (np.pi if ref_delta < 0 else 0.0)
        ref_rate, _ = self._phase_rate(channel, ref_phasor, mode)
        centers, expected = _expected_histogram(ref_rate, omega, detection.phase_bins, detection.integration_s)
        corr_ref = fit_fixed_frequency_sinusoid(centers, expected).params["phase"]
        if ref_delta < 0:
            corr_ref += np.pi

        def point(index: int, delta: float):
            drive = self._phase_drive(channel, delta)
            r0, v0 = steady_state_start(model, drive)
            traj = integrate_trajectory(
                model, drive, damping=self.settings.drive.damping, r0=r0, v0=v0,
                duration=scan.phase_periods * drive.period,
            )
            phasor = micromotion_phasor(traj, omega)
            predicted = predicted_micromotion(model, drive)
            rate_fn, cap = self._phase_rate(channel, phasor, mode)
            stream = sample_photon_arrivals(
                rate_fn, (0.0, detection.integration_s), cap * (1.0 + 1e-6), self.point_seed(name, index)
            )
            bins, counts = fold_arrivals(stream, omega, detection.phase_bins)
            corr = fit_fixed_frequency_sinusoid(bins, counts, reference_phase=corr_ref, sigma=np.sqrt(np.maximum(counts, 1.0)))
            return {
                "amplitude_nm": phasor.signed_amplitude(axis, ref_phase) / _NM,
                "predicted_nm": np.sign(delta) * predicted.amplitudes[axis] / _NM,
                "correlation": corr["amplitude"],
                "correlation_err": corr.errors["amplitude"],
                "photons": stream.count,
                "stream": stream,
            }

        rows = self.map_points(point, deltas)
        amplitude = np.array([r["amplitude_nm"] for r in rows])
        correlation = np.array([r["correlation"] for r in rows])
        correlation_err = _finite_errors([r["correlation_err"] for r in rows])
        table = ScanTable(
            independent={"delta_rad": deltas},
            dependent={
                "amplitude_nm": amplitude,
                "predicted_nm": [r["predicted_nm"] for r in rows],
                "correlation_counts": correlation,
                "photons": [r["photons"] for r in rows],
            },
            errors={"correlation_counts": correlation_err},
            metadata=self.metadata(name, channel=channel, phase_bins=detection.phase_bins),
        )

        fits = {"trajectory": fit_line(deltas, amplitude)}
        if np.all(correlation_err > 0):
            fits["correlation"] = fit_line(deltas, correlation, sigma=correlation_err)
        else:
            fits["correlation"] = fit_line(deltas, correlation)

        if channel == "radial":
            params = mismatch_params(model, self._phase_drive(channel, ref_delta), RADIAL_Y)
            predicted_slope = mismatch_micromotion_prediction(params) / abs(ref_delta) / _NM
        else:
            predicted_slope = float(abs(ref_phasor.amplitudes[axis]) / abs(ref_delta) / _NM)

        summary = {}
        for label, fit in fits.items():
            slope = fit["c1"]
            summary[label] = {
                "slope": slope,
                "zero_crossing_rad": -fit["c0"] / slope if slope != 0 else None,
                "r_squared": fit["r_squared"],
            }
        lo, hi = int(np.argmin(deltas)), int(np.argmax(deltas))
        summary["polarity_flip"] = bool(np.sign(amplitude[lo]) != np.sign(amplitude[hi]))
        summary["correlation_polarity_flip"] = bool(np.sign(correlation[lo]) != np.sign(correlation[hi]))
        summary["predicted_slope_nm_per_rad"] = predicted_slope
        summary["slope_ratio"] = fits["trajectory"]["c1"] / predicted_slope if predicted_slope else None
        logger.info(
            f"✅ Phase scan ({channel}): slope {fits['trajectory']['c1']:.3f} nm/rad "
            f"(predicted {predicted_slope:.3f}), R^2={fits['trajectory']['r_squared']:.4f}"
        )
        return ExperimentResult(name=name, table=table, fits=fits, summary=summary, artifacts={"photons": rows[hi]["stream"]})

    # =========================================================================
    # Cavity mode mapping
    # =========================================================================

    def _draw_counts(self, expected: np.ndarray, seed: List[int]) -> Tuple[np.ndarray, np.ndarray]:
        """Mean and standard error of `repeats` Poisson draws, or the expectation when noiseless"""
        if self.settings.scan.noiseless:
            return expected, np.zeros_like(expected)
        repeats = self.settings.detection.repeats
        draws = np.random.default_rng(seed).poisson(np.broadcast_to(expected, (repeats,) + np.shape(expected)))
        error = np.sqrt(np.maximum(draws.mean(axis=0), 1.0) / repeats)
        return draws.mean(axis=0), error

    def run_axial_standing_wave_scan(self) -> ExperimentResult:
        """Cavity emission while the differential inner drive moves the ion along the axis"""
        name = "axial_scan"
        model, _ = self.calibrated
        detection = self.settings.detection
        emission = detection.to_emission()
        mode = self.cavity_mode()
        settings_vpp = np.asarray(self.settings.scan.axial_generator_vpp, dtype=float)
        transmission = self.settings.drive.line_transmission
        sigma_z = detection.sigma_z_nm * _NM

        def point(index: int, setting: float):
            position = equilibrium_position(model, self.base_drive().differential_inner(transmission * setting))
            rho = float(np.hypot(position[0] - mode.axis_offset[0], position[1] - mode.axis_offset[1]))
            intensity = mean_mode_intensity(mode, float(position[2]), sigma_z, rho)
            expected = (emission.background_rate + emission.peak_rate * intensity) * detection.integration_s
            counts, error = self._draw_counts(np.array([expected]), self.point_seed(name, index))
            return position[2], expected, counts[0], error[0]

        rows = np.array(self.map_points(point, settings_vpp))
        z_um = rows[:, 0] / _UM
        counts, errors = rows[:, 2], rows[:, 3]
        background = emission.background_rate * detection.integration_s

        shift = fit_line(settings_vpp, z_um)
        dz_dv = abs(shift["c1"])
        period_guess = mode.wavelength / 2.0 / _UM / dz_dv if dz_dv > 0 else 1.0
        sigma = errors if np.all(errors > 0) else None
        wave = fit_standing_wave(settings_vpp, counts, background, period_guess, sigma=sigma)

        table = ScanTable(
            independent={"generator_Vpp": settings_vpp},
            dependent={"z_um": z_um, "expected_counts": rows[:, 1], "counts": counts},
            errors={"counts": errors},
            metadata=self.metadata(name, line_transmission=transmission, sigma_z_nm=detection.sigma_z_nm),
        )
        summary = {
            "antinode_spacing_nm": wave["period"] * dz_dv * 1e3,
            "visibility": wave["visibility"],
            "period_vpp": wave["period"],
            "axial_shift_um_per_vpp": shift["c1"],
        }
        logger.info(
            f"✅ Standing wave: spacing {summary['antinode_spacing_nm']:.1f} nm, visibility {summary['visibility']:.3f}"
        )
        return ExperimentResult(name=name, table=table, fits={"standing_wave": wave, "axial_shift": shift}, summary=summary)

    def _spectral_area(self, detunings: np.ndarray, spectrum: np.ndarray, widths: Tuple[float, float], error) -> Tuple[float, float, bool]:
        """Pseudo-Voigt area of one spectrum; falls back to the configured line shape"""
        span = float(detunings.max() - detunings.min())
        try:
            fit = fit_pseudo_voigt(detunings, spectrum, sigma=error)
            plausible = (
                fit.converged
                and abs(fit["center"]) < 0.5 * span
                and 0 < fit.extras["fwhm"] < span
                and np.isfinite(fit.extras["spectral_area_error"])
            )
            if plausible:
                return fit.extras["spectral_area"], fit.extras["spectral_area_error"], True
        except FitError as e:
            logger.debug(f"Free line fit failed, using fixed shape: {e}")
        area, area_error = _fixed_shape_area(detunings, spectrum, 0.0, *widths)
        return area, area_error, False

    def run_radial_mode_map(self) -> ExperimentResult:
        """Spectral area of cavity emission while a radial electrode displaces the ion"""
        name = "radial_map"
        model, _ = self.calibrated
        detection = self.settings.detection
        emission = detection.to_emission()
        mode = self.cavity_mode()
        gain = self.amplifier_gain
        settings_vpp = np.asarray(self.settings.scan.radial_generator_vpp, dtype=float)
        sigma_z = detection.sigma_z_nm * _NM

        widths = (emission.gaussian_width / _MHZ, emission.lorentzian_width / _MHZ)
        fwhm = tch_mixing(*widths)[1]
        detunings = np.linspace(-1.0, 1.0, detection.detuning_points) * detection.detuning_span_fwhm * fwhm
        line = pseudo_voigt_profile(detunings, 0.0, *widths)
        dwell = detection.integration_s / detection.detuning_points
        noiseless = self.settings.scan.noiseless
        repeats = 1 if noiseless else detection.repeats
        logger.info(f"🚀 Radial mode map: {settings_vpp.size} settings x {repeats} spectra, gain {gain:.2f} V/Vpp")

        def point(index: int, setting: float):
            null = equilibrium_position(model, self.base_drive().with_signed_channel(RADIAL_Y, gain * setting))
            z_ion = nearest_antinode(mode, float(null[2]))
            rho = float(np.hypot(null[0] - mode.axis_offset[0], null[1] - mode.axis_offset[1]))
            intensity = mean_mode_intensity(mode, z_ion, sigma_z, rho)
            expected = (emission.background_rate + emission.peak_rate * intensity * line) * dwell
            if noiseless:
                spectra = expected[None, :]
            else:
                spectra = np.random.default_rng(self.point_seed(name, index)).poisson(
                    np.broadcast_to(expected, (repeats, expected.size))
                ).astype(float)
            areas, free = [], 0
            for spectrum in spectra:
                error = None if noiseless else np.sqrt(np.maximum(spectrum, 1.0))
                area, _, used_free = self._spectral_area(detunings, spectrum, widths, error)
                areas.append(area)
                free += int(used_free)
            areas = np.array(areas)
            area_error = float(areas.std(ddof=1) / np.sqrt(areas.size)) if areas.size > 1 else 0.0
            return null[1] / _UM, intensity, float(areas.mean()), area_error, free

        rows = np.array(self.map_points(point, settings_vpp))
        y_um, areas, area_errors = rows[:, 0], rows[:, 2], rows[:, 3]
        sigma = area_errors if np.all(area_errors > 0) else None
        profile = fit_gaussian_1d(y_um, areas, sigma=sigma)

        table = ScanTable(
            independent={"generator_Vpp": settings_vpp},
            dependent={"y_um": y_um, "mode_intensity": rows[:, 1], "spectral_area": areas, "free_fits": rows[:, 4]},
            errors={"spectral_area": area_errors},
            metadata=self.metadata(name, amplifier_gain_v_per_vpp=gain, repeats=repeats, detuning_unit="MHz"),
        )
        summary = {
            "waist_um": profile["waist"],
            "center_um": profile["center"],
            "converged": profile.converged,
            "configured_waist_um": mode.waist / _UM,
        }
        logger.info(f"✅ Radial map: waist {profile['waist']:.3f} um, centre {profile['center']:+.3f} um")
        return ExperimentResult(name=name, table=table, fits={"mode_profile": profile}, summary=summary)

    # =========================================================================
    # Camera displacement calibration
    # =========================================================================

    def run_displacement_calibration(self, amplifier_gain: Optional[float] = None) -> ExperimentResult:
        """Camera-measured ion position versus radial generator setting"""
        name = "displacement_cal"
        model, _ = self.calibrated
        detection = self.settings.detection
        camera = detection.to_camera()
        gain = self.amplifier_gain if amplifier_gain is None else amplifier_gain
        settings_vpp = np.asarray(self.settings.scan.displacement_generator_vpp, dtype=float)

        def frame_at(index: int, setting: float):
            null = equilibrium_position(model, self.base_drive().with_signed_channel(RADIAL_Y, gain * setting))
            frame = render_ion_image(
                (null[1], null[2]), 0.0, camera, detection.camera_exposure_s,
                detection.camera_photon_rate_cps, self.point_seed(name, index),
            )
            spot = fit_gaussian_spot_2d(frame, camera)
            return null, frame, spot

        # The zero-setting frame defines the origin; it gets the index after the scan points
        _, reference_frame, reference = frame_at(settings_vpp.size, 0.0)
        rows = self.map_points(frame_at, settings_vpp)

        measured = np.array([(spot.extras["x0_m"] - reference.extras["x0_m"]) / _UM for _, _, spot in rows])
        measured_err = np.array([spot.errors["x0"] * camera.pixel_pitch_object / _UM for _, _, spot in rows])
        true_shift = np.array([null[1] / _UM for null, _, _ in rows])
        table = ScanTable(
            independent={"generator_Vpp": settings_vpp},
            dependent={"displacement_um": measured, "true_displacement_um": true_shift},
            errors={"displacement_um": _finite_errors(measured_err)},
            metadata=self.metadata(name, amplifier_gain_v_per_vpp=gain, pixel_um=detection.camera_pixel_um),
        )
        line = fit_line(settings_vpp, measured)
        summary = {
            "slope_um_per_vpp": line["c1"],
            "abs_slope_um_per_vpp": abs(line["c1"]),
            "reference_centroid_px": [reference["x0"], reference["y0"]],
            "amplifier_gain_v_per_vpp": gain,
        }
        artifacts = {f"frame_{k:02d}": frame for k, (_, frame, _) in enumerate(rows)}
        artifacts["frame_reference"] = reference_frame
        logger.info(f"✅ Displacement calibration: {abs(line['c1']):.3f} um/Vpp")
        return ExperimentResult(name=name, table=table, fits={"line": line}, summary=summary, artifacts=artifacts)

    # =========================================================================
    # Cavity lock
    # =========================================================================

    def run_servo_simulation(self) -> ExperimentResult:
        """Loop margins, Bode table, time-domain lock and measured sensitivity"""
        name = "servo_sim"
        servo = self.settings.servo
        plant = servo.to_plant(self.settings.cavity.lock_linewidth_nm)
        filt = compose_loop_filter(
            servo.to_sections(), servo.sample_rate_hz, (servo.kp, servo.ki), 1.0, servo.delay_samples
        )
        margins = loop_margins(plant, filt)
        freqs = np.geomspace(10.0, 0.45 * servo.sample_rate_hz, 400)
        table = bode_table(plant, filt, freqs)
        table.metadata.update(self.metadata(name, actuator=servo.actuator))
        lock = simulate_lock(plant, filt, servo.to_noise(), servo.duration_s, self.point_seed(name, 0))
        sensitivity = measure_sensitivity(plant, filt, servo.probe_frequencies_hz)
        sensitivity.metadata.update(self.metadata(f"{name}_sensitivity"))

        summary = {
            "margins": margins.to_dict(),
            "lock": lock.to_dict(),
            "linewidth_nm": plant.linewidth_nm,
            "residual_fraction_of_linewidth": lock.residual_std,
        }
        return ExperimentResult(
            name=name, table=table, summary=summary,
            artifacts={"residual": lock, "sensitivity": sensitivity},
        )

    # =========================================================================
    # Everything
    # =========================================================================

    def run_all(self) -> List[ExperimentResult]:
        runs: List[Callable[[], ExperimentResult]] = [
            self.calibrate,
            self.run_minimum_scan,
            self.run_secular_slope_scan,
            lambda: self.run_phase_scan("radial"),
            lambda: self.run_phase_scan("axial"),
            self.run_axial_standing_wave_scan,
            self.run_radial_mode_map,
            self.run_displacement_calibration,
            self.run_servo_simulation,
        ]
        results = []
        for run in runs:
            results.append(run())
        logger.info(f"🎉 Completed {len(results)} experiments")
        return results
