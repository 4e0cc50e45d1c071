"""
Configuration settings for the fibre-cavity ion trap simulator
"""
import hashlib
import json
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from models.errors import ConfigurationError
from models.fields import TrapGeometry
from models.optics import CameraModel, EmissionParams, LaserParams
from models.servo import FilterSection, NoiseModel, PlantModel, Resonance, linewidth_in_length
from models.trap import CalibrationTargets

_UM = 1e-6
_MHZ = 2.0 * np.pi * 1e6


def _grid(start: float, stop: float, num: int) -> List[float]:
    return [round(float(v), 9) for v in np.linspace(start, stop, num)]


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# =============================================================================
# TRAP GEOMETRY AND FIELD SOLVER
# =============================================================================
class TrapSection(Section):
    inner_electrode_inner_radius_um: float = Field(default=90.0, gt=0)
    inner_electrode_outer_radius_um: float = Field(default=150.0, gt=0)
    outer_electrode_inner_radius_um: float = Field(default=250.0, gt=0)
    outer_electrode_outer_radius_um: float = Field(default=400.0, gt=0)
    tip_gap_um: float = Field(default=350.0, gt=0)
    fibre_recess_um: float = Field(default=10.0, gt=0)
    radial_electrode_distance_um: float = Field(default=1000.0, gt=0)
    radial_electrode_radius_um: float = Field(default=250.0, gt=0)
    domain_radius_um: float = Field(default=1200.0, gt=0)
    domain_half_height_um: float = Field(default=1200.0, gt=0)
    outer_electrode_setback_um: float = Field(default=50.0, gt=0)
    grid_spacing_um: float = Field(default=5.0, gt=0)
    solver_tolerance: float = Field(default=1e-8, gt=0, lt=1)
    fit_radius_um: float = Field(default=50.0, gt=0)
    validity_radius_um: float = Field(default=100.0, gt=0)

    def to_geometry(self) -> TrapGeometry:
        return TrapGeometry(
            inner_electrode_inner_radius=self.inner_electrode_inner_radius_um * _UM,
            inner_electrode_outer_radius=self.inner_electrode_outer_radius_um * _UM,
            outer_electrode_inner_radius=self.outer_electrode_inner_radius_um * _UM,
            outer_electrode_outer_radius=self.outer_electrode_outer_radius_um * _UM,
            tip_gap=self.tip_gap_um * _UM,
            fibre_recess=self.fibre_recess_um * _UM,
            radial_electrode_distance=self.radial_electrode_distance_um * _UM,
            radial_electrode_radius=self.radial_electrode_radius_um * _UM,
            domain_radius=self.domain_radius_um * _UM,
            domain_half_height=self.domain_half_height_um * _UM,
            outer_electrode_setback=self.outer_electrode_setback_um * _UM,
        )


# =============================================================================
# RF DRIVE
# =============================================================================
class DriveSection(Section):
    rf_frequency_mhz: float = Field(default=20.0, gt=0)
    v_main_v: float = Field(default=200.0, gt=0)
    amplifier_gain_v_per_vpp: Optional[float] = Field(default=None, gt=0)  # None: from calibration
    line_transmission: float = Field(default=0.5, gt=0)  # differential drive losses, generator -> electrode
    comp_x_dc_v: float = 0.0
    comp_y_dc_v: float = 0.0
    cooling_damping_khz: float = Field(default=5.0, ge=0)

    @property
    def omega_rf(self) -> float:
        return self.rf_frequency_mhz * _MHZ

    @property
    def damping(self) -> float:
        return 2.0 * np.pi * self.cooling_damping_khz * 1e3


# =============================================================================
# CAVITY
# =============================================================================
class CavitySection(Section):
    length_um: float = Field(default=370.0, gt=0)
    roc_upper_um: float = Field(default=560.0, gt=0)
    roc_lower_um: float = Field(default=560.0, gt=0)
    wavelength_nm: float = Field(default=866.0, gt=0)
    finesse: float = Field(default=48000.0, gt=0)
    axis_offset_x_um: float = 0.0
    axis_offset_y_um: float = -3.9
    antinode_offset_nm: float = 0.0
    lock_wavelength_nm: float = Field(default=897.0, gt=0)
    lock_linewidth_mhz: float = Field(default=22.0, gt=0)

    @property
    def axis_offset(self) -> Tuple[float, float]:
        return self.axis_offset_x_um * _UM, self.axis_offset_y_um * _UM

    @property
    def lock_linewidth_nm(self) -> float:
        return linewidth_in_length(self.length_um * _UM, self.lock_linewidth_mhz * 1e6, self.lock_wavelength_nm * 1e-9)


# =============================================================================
# LASER
# =============================================================================
class LaserSection(Section):
    wavelength_nm: float = Field(default=397.0, gt=0)
    linewidth_mhz: float = Field(default=21.6, gt=0)
    detuning_linewidths: float = -0.5
    saturation: float = Field(default=1.0, gt=0)
    detection_efficiency: float = Field(default=1e-3, gt=0, le=1)
    k_direction: Tuple[float, float, float] = (0.0, 1.0, 0.0)

    @field_validator("k_direction")
    @classmethod
    def _non_zero_direction(cls, v):
        if not np.any(np.asarray(v)):
            raise ValueError("k_direction must be non-zero")
        return v

    def to_laser(self) -> LaserParams:
        gamma = self.linewidth_mhz * _MHZ
        direction = np.asarray(self.k_direction, dtype=float)
        k = 2.0 * np.pi / (self.wavelength_nm * 1e-9) * direction / np.linalg.norm(direction)
        return LaserParams(
            detuning=self.detuning_linewidths * gamma,
            linewidth=gamma,
            saturation=self.saturation,
            k_vector=tuple(k),
            efficiency=self.detection_efficiency,
        )


# =============================================================================
# DETECTION: CAVITY EMISSION AND CAMERA
# =============================================================================
class DetectionSection(Section):
    background_rate_cps: float = Field(default=4200.0, ge=0)
    peak_rate_cps: float = Field(default=3.0e4, ge=0)
    lorentzian_hwhm_mhz: float = Field(default=1.5, gt=0)
    gaussian_sigma_mhz: float = Field(default=1.0, gt=0)
    sigma_z_nm: float = Field(default=42.0, ge=0)
    integration_s: float = Field(default=1.0, gt=0)
    phase_bins: int = Field(default=16, ge=8)
    repeats: int = Field(default=10, ge=1)
    detuning_points: int = Field(default=25, ge=9)
    detuning_span_fwhm: float = Field(default=4.0, gt=0)
    camera_pixel_um: float = Field(default=2.0, gt=0)
    camera_psf_um: float = Field(default=1.5, gt=0)
    camera_dark_cps: float = Field(default=0.5, ge=0)
    camera_width_px: int = Field(default=64, ge=3)
    camera_height_px: int = Field(default=48, ge=3)
    camera_exposure_s: float = Field(default=0.2, ge=0)
    camera_photon_rate_cps: float = Field(default=1.0e5, ge=0)
    camera_counts_per_photon: float = Field(default=1.0, gt=0)

    def to_emission(self) -> EmissionParams:
        return EmissionParams(
            peak_rate=self.peak_rate_cps,
            lorentzian_width=self.lorentzian_hwhm_mhz * _MHZ,
            gaussian_width=self.gaussian_sigma_mhz * _MHZ,
            background_rate=self.background_rate_cps,
        )

    def to_camera(self) -> CameraModel:
        return CameraModel(
            pixel_pitch_object=self.camera_pixel_um * _UM,
            psf_sigma=self.camera_psf_um * _UM,
            counts_per_photon=self.camera_counts_per_photon,
            dark_rate=self.camera_dark_cps,
            sensor_extent=(self.camera_width_px, self.camera_height_px),
        )


# =============================================================================
# CAVITY LOCK SERVO
# =============================================================================
class ServoSection(Section):
    sample_rate_hz: float = Field(default=1.0e6, gt=0)
    duration_s: float = Field(default=0.2, gt=0)
    actuator: Literal["multilayer", "monolayer"] = "multilayer"
    resonance_hz: List[float] = Field(default_factory=lambda: [900.0, 9000.0])
    resonance_q: List[float] = Field(default_factory=lambda: [8.0, 8.0])
    resonance_sign: List[int] = Field(default_factory=lambda: [1, 1])
    zero_ratio: float = Field(default=1.1, gt=0)
    rolloff_hz: Optional[float] = Field(default=30e3, gt=0)
    kp: float = 2.43e-3
    ki: float = 305.0
    eq_frequency_hz: List[float] = Field(default_factory=lambda: [900.0, 9000.0])
    eq_q: List[float] = Field(default_factory=lambda: [2.0, 2.0])
    eq_band_gain: List[float] = Field(default_factory=lambda: [0.6, 0.4])
    delay_samples: int = Field(default=1, ge=0)
    vibration_rms_linewidths: float = Field(default=0.6, ge=0)
    vibration_corner_hz: float = Field(default=10.0, gt=0)
    sensor_rms_linewidths: float = Field(default=0.2, ge=0)
    probe_frequencies_hz: List[float] = Field(
        default_factory=lambda: [200.0, 334.0, 557.0, 929.0, 1549.0, 2583.0, 4307.0, 7181.0, 11974.0, 20000.0]
    )

    def to_plant(self, linewidth_nm: float) -> PlantModel:
        if not len(self.resonance_hz) == len(self.resonance_q) == len(self.resonance_sign):
            raise ConfigurationError("resonance lists must have equal length", ["servo.resonance_hz"])
        resonances = tuple(
            Resonance(f, q, s, self.zero_ratio) for f, q, s in zip(self.resonance_hz, self.resonance_q, self.resonance_sign)
        )
        return PlantModel(resonances=resonances, actuator=self.actuator, rolloff_hz=self.rolloff_hz, linewidth_nm=linewidth_nm)

    def to_sections(self) -> List[FilterSection]:
        if not len(self.eq_frequency_hz) == len(self.eq_q) == len(self.eq_band_gain):
            raise ConfigurationError("filter section lists must have equal length", ["servo.eq_frequency_hz"])
        return [FilterSection(f, q, gain_band=g) for f, q, g in zip(self.eq_frequency_hz, self.eq_q, self.eq_band_gain)]

    def to_noise(self) -> NoiseModel:
        return NoiseModel(self.vibration_rms_linewidths, self.vibration_corner_hz, self.sensor_rms_linewidths)


# =============================================================================
# CALIBRATION TARGETS
# =============================================================================
class CalibrationSection(Section):
    axial_slope_khz_per_v: Optional[float] = 7.3
    radial_slope_khz_per_v: Optional[float] = 13.6
    shift_quadratic_um_per_v2: Optional[float] = 6.1e-5
    shift_linear_um_per_v: Optional[float] = -0.1
    axial_shift_um_per_v: Optional[float] = 2.0
    displacement_gradient_um_per_vpp: Optional[float] = 17.3
    reference_amplitude_v: float = Field(default=200.0, gt=0)
    axial_weight: float = Field(default=1.0, ge=0)
    radial_weight: float = Field(default=0.0, ge=0)
    closure_points: int = Field(default=21, ge=3)
    use_solved_basis: bool = False

    def to_targets(self, omega_rf: float, generator_settings: List[float]) -> CalibrationTargets:
        return CalibrationTargets(
            axial_slope_khz_per_v=self.axial_slope_khz_per_v,
            radial_slope_khz_per_v=self.radial_slope_khz_per_v,
            shift_quadratic_um_per_v2=self.shift_quadratic_um_per_v2,
            shift_linear_um_per_v=self.shift_linear_um_per_v,
            axial_shift_um_per_v=self.axial_shift_um_per_v,
            displacement_gradient_um_per_vpp=self.displacement_gradient_um_per_vpp,
            reference_amplitude_v=self.reference_amplitude_v,
            omega_rf=omega_rf,
            axial_weight=self.axial_weight,
            radial_weight=self.radial_weight,
            closure_points=self.closure_points,
            generator_settings_vpp=tuple(generator_settings),
        )


# =============================================================================
# SCAN GRIDS
# =============================================================================
class ScanSection(Section):
    minimum_electrode: Literal["radial_x", "radial_y", "comp_x", "comp_y"] = "radial_y"
    minimum_amplitudes_v: List[float] = Field(default_factory=lambda: _grid(0.0, 200.0, 21), min_length=1)
    secular_amplitudes_v: List[float] = Field(default_factory=lambda: _grid(20.0, 200.0, 10), min_length=1)
    secular_trajectory_check: bool = False
    phase_deltas_rad: List[float] = Field(default_factory=lambda: _grid(-0.05, 0.05, 11), min_length=2)
    phase_radial_amplitude_v: float = Field(default=50.0, ge=0)
    phase_axial_differential_v: float = 1.0
    phase_periods: int = Field(default=60, ge=50)
    axial_generator_vpp: List[float] = Field(default_factory=lambda: _grid(-0.5, 0.5, 41), min_length=5)
    radial_generator_vpp: List[float] = Field(default_factory=lambda: _grid(-0.7, 1.1, 19), min_length=5)
    displacement_generator_vpp: List[float] = Field(default_factory=lambda: _grid(-0.5, 0.5, 11), min_length=2)
    noiseless: bool = False


class Settings(BaseSettings):
    """Application settings: defaults, then environment, then an explicit TOML file"""

    # =============================================================================
    # APPLICATION SETTINGS
    # =============================================================================
    environment: str = "development"
    log_level: str = "INFO"
    database_url: str = "sqlite:///experiment_runs.db"
    master_seed: int = Field(default=20240501, ge=0)
    workers: int = Field(default=1, ge=1)

    # =============================================================================
    # SIMULATION SECTIONS
    # =============================================================================
    trap: TrapSection = Field(default_factory=TrapSection)
    drive: DriveSection = Field(default_factory=DriveSection)
    cavity: CavitySection = Field(default_factory=CavitySection)
    laser: LaserSection = Field(default_factory=LaserSection)
    detection: DetectionSection = Field(default_factory=DetectionSection)
    servo: ServoSection = Field(default_factory=ServoSection)
    calibration: CalibrationSection = Field(default_factory=CalibrationSection)
    scan: ScanSection = Field(default_factory=ScanSection)

    model_config = SettingsConfigDict(
        env_prefix="FIBRETRAP_",
        env_nested_delimiter="__",
        case_sensitive=False,
        extra="forbid",
    )


# Keys that do not change simulated outputs
_RUNTIME_KEYS = {"environment", "log_level", "database_url", "workers"}


def _validation_keys(error: ValidationError) -> List[str]:
    return [".".join(str(part) for part in item["loc"]) for item in error.errors()]


def build_settings(**overrides) -> Settings:
    """Validate overrides on top of env/defaults, mapping pydantic errors to ConfigurationError"""
    try:
        return Settings(**overrides)
    except ValidationError as e:
        keys = _validation_keys(e)
        raise ConfigurationError(f"invalid configuration: {keys}", keys) from e


def load_settings(path=None, **overrides) -> Settings:
    """
    Load settings from a TOML file

    Args:
        path: TOML file; None for defaults plus environment
        overrides: top-level values applied after the file (e.g. master_seed)

    Returns:
        Validated Settings
    """
    data = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}", [str(path)])
        with path.open("rb") as fh:
            try:
                data = tomllib.load(fh)
            except tomllib.TOMLDecodeError as e:
                raise ConfigurationError(f"config file {path} is not valid TOML: {e}", [str(path)]) from e
    data.update({k: v for k, v in overrides.items() if v is not None})
    return build_settings(**data)


def config_hash(settings: "Settings") -> str:
    """SHA-256 of the canonical JSON of every simulation-relevant value"""
    payload = settings.model_dump(mode="json", exclude=_RUNTIME_KEYS)
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


# Global settings instance
settings = Settings()
