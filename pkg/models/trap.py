"""
Trap records: ion species, RF drive configuration, multipole trap model and calibration data
"""
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
from scipy import constants

from models.errors import ConfigurationError, GeometryError
from models.fields import MultipoleBasis, MultipoleEntry

ATOMIC_MASS = constants.physical_constants["atomic mass constant"][0]
CA40_MASS = 40.0 * ATOMIC_MASS - constants.m_e

OUTER_PAIR = "outer_pair"
INNER_UPPER = "inner_upper"
INNER_LOWER = "inner_lower"
RADIAL_X = "radial_x"
RADIAL_Y = "radial_y"
COMP_X = "comp_x"
COMP_Y = "comp_y"
ELECTRODE_LABELS = (OUTER_PAIR, INNER_UPPER, INNER_LOWER, RADIAL_X, RADIAL_Y, COMP_X, COMP_Y)

# Differential inner drive is expressed through signed amplitudes
SIGNED_CHANNELS = (INNER_UPPER, INNER_LOWER)


@dataclass(frozen=True)
class IonSpecies:
    mass: float = CA40_MASS
    charge: float = constants.e

    def __post_init__(self):
        if self.mass <= 0 or self.charge <= 0:
            raise ConfigurationError("ion mass and charge must be positive", ["mass", "charge"])


@dataclass(frozen=True)
class ElectrodeDrive:
    """RF amplitude (V), phase (rad) and dc offset (V) on one electrode"""
    amplitude: float = 0.0
    phase: float = 0.0
    dc: float = 0.0

    @property
    def phasor(self) -> complex:
        return self.amplitude * np.exp(1j * self.phase)


@dataclass(frozen=True)
class DriveConfig:
    """Synchronous RF sources at a common angular frequency omega_rf"""
    omega_rf: float
    channels: Mapping[str, ElectrodeDrive] = field(default_factory=dict)

    def __post_init__(self):
        if self.omega_rf <= 0:
            raise ConfigurationError("omega_rf must be positive", ["omega_rf"])
        channels = dict(self.channels)
        for label, drive in channels.items():
            if label not in ELECTRODE_LABELS:
                raise ConfigurationError(f"unknown electrode '{label}'", [label])
            if drive.amplitude < 0 and label not in SIGNED_CHANNELS:
                raise ConfigurationError(f"amplitude on '{label}' must be non-negative", [label])
        object.__setattr__(self, "channels", channels)

    @classmethod
    def main_only(cls, omega_rf: float, v_main: float) -> "DriveConfig":
        return cls(omega_rf=omega_rf, channels={OUTER_PAIR: ElectrodeDrive(v_main)})

    @property
    def period(self) -> float:
        return 2.0 * np.pi / self.omega_rf

    def with_channel(self, label: str, amplitude: float, phase: float = 0.0, dc: float = 0.0) -> "DriveConfig":
        channels = dict(self.channels)
        channels[label] = ElectrodeDrive(amplitude, phase, dc)
        return replace(self, channels=channels)

    def with_signed_channel(self, label: str, setting: float, phase: float = 0.0) -> "DriveConfig":
        """Negative settings become a pi phase flip on non-signed channels"""
        if setting < 0 and label not in SIGNED_CHANNELS:
            return self.with_channel(label, -setting, phase + np.pi)
        return self.with_channel(label, setting, phase)

    def differential_inner(self, v_z: float, phase: float = 0.0) -> "DriveConfig":
        """(+V_z/2, -V_z/2) on the upper/lower inner electrodes, equal phases"""
        return self.with_channel(INNER_UPPER, v_z / 2.0, phase).with_channel(INNER_LOWER, -v_z / 2.0, phase)

    def scaled(self, factor: float) -> "DriveConfig":
        return replace(self, channels={k: replace(d, amplitude=d.amplitude * factor) for k, d in self.channels.items()})

    def phase_shifted(self, shift: float) -> "DriveConfig":
        return replace(self, channels={k: replace(d, phase=d.phase + shift) for k, d in self.channels.items()})

    def phasors(self) -> Dict[str, complex]:
        return {label: drive.phasor for label, drive in self.channels.items()}

    def dc_offsets(self) -> Dict[str, float]:
        return {label: drive.dc for label, drive in self.channels.items() if drive.dc != 0.0}


@dataclass(frozen=True)
class TrapModel:
    """Per-electrode unit-voltage multipole basis about the trap centre"""
    basis: MultipoleBasis
    ion: IonSpecies = field(default_factory=IonSpecies)
    validity_radius: float = 1.0e-4

    def __post_init__(self):
        if OUTER_PAIR not in self.basis:
            raise GeometryError("trap model needs an outer_pair entry")
        unknown = sorted(set(self.basis) - set(ELECTRODE_LABELS))
        if unknown:
            raise GeometryError(f"unknown electrodes in basis: {unknown}")
        outer = self.basis[OUTER_PAIR]
        if np.linalg.norm(outer.b) > 1e-6 * np.abs(outer.Q).max() * self.validity_radius:
            raise GeometryError("outer_pair dipole must vanish by symmetry")
        if self.validity_radius <= 0:
            raise GeometryError("validity radius must be positive")

    def entry(self, label: str) -> MultipoleEntry:
        try:
            return self.basis[label]
        except KeyError:
            raise ConfigurationError(f"electrode '{label}' is not in the trap model", [label]) from None


@dataclass(frozen=True)
class CalibrationTargets:
    """Measured numbers the analytic model is pinned to; None marks a missing target"""
    axial_slope_khz_per_v: Optional[float] = None
    radial_slope_khz_per_v: Optional[float] = None
    shift_quadratic_um_per_v2: Optional[float] = None
    shift_linear_um_per_v: Optional[float] = None
    axial_shift_um_per_v: Optional[float] = None
    displacement_gradient_um_per_vpp: Optional[float] = None
    reference_amplitude_v: float = 200.0
    omega_rf: float = 2.0 * np.pi * 20e6
    axial_weight: float = 1.0
    radial_weight: float = 0.0
    closure_points: int = 21
    generator_settings_vpp: Tuple[float, ...] = tuple(np.linspace(-0.5, 0.5, 11))

    REQUIRED = (
        "axial_slope_khz_per_v",
        "radial_slope_khz_per_v",
        "shift_quadratic_um_per_v2",
        "shift_linear_um_per_v",
        "axial_shift_um_per_v",
    )

    def missing(self) -> List[str]:
        return [name for name in self.REQUIRED if getattr(self, name) is None]


@dataclass(frozen=True)
class CalibrationReport:
    quadrupole_strength: float
    axial_weight: float
    radial_weight: float
    axial_slope_model_khz_per_v: float
    radial_slope_model_khz_per_v: float
    axial_slope_residual_khz_per_v: float
    radial_slope_residual_khz_per_v: float
    shift_dipole_um_per_v: float
    shift_curvature_per_v: float
    radial_dipole: float
    radial_quadrupole: float
    axial_dipole: float
    amplifier_gain: Optional[float]
    closure_amplitudes_v: Tuple[float, ...]
    closure_coefficients: Tuple[float, float]

    def to_dict(self) -> dict:
        data = asdict(self)
        data["closure_amplitudes_v"] = list(self.closure_amplitudes_v)
        data["closure_coefficients"] = list(self.closure_coefficients)
        return data


@dataclass(frozen=True)
class SecularResult:
    """Secular frequencies (Hz, ascending) with principal axes as columns"""
    frequencies: np.ndarray
    axes: np.ndarray
    null_position: np.ndarray

    @property
    def axial_index(self) -> int:
        return int(np.argmax(np.abs(self.axes[2, :])))

    @property
    def axial(self) -> float:
        return float(self.frequencies[self.axial_index])

    @property
    def radial(self) -> Tuple[float, float]:
        return tuple(float(f) for k, f in enumerate(self.frequencies) if k != self.axial_index)


@dataclass(frozen=True)
class StabilityParameters:
    """Mathieu a and q along x, y, z"""
    a: np.ndarray
    q: np.ndarray
