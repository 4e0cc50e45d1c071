"""
Cavity-lock records: piezo plant, loop filter, noise and lock results
"""
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from models.errors import ConfigurationError

# Piezo stroke per volt (nm/V)
ACTUATOR_STROKES = {"multilayer": 1.5, "monolayer": 0.45}

SPEED_OF_LIGHT = 299_792_458.0


def linewidth_in_length(cavity_length: float, linewidth_hz: float, wavelength: float) -> float:
    """Cavity length change (nm) that detunes the resonance by one linewidth"""
    return cavity_length * linewidth_hz * wavelength / SPEED_OF_LIGHT * 1e9


@dataclass(frozen=True)
class Resonance:
    """Mechanical resonance: pole pair at frequency_hz with a zero pair zero_ratio away.

    sign=+1 puts the zero above the pole (gain peak then notch), -1 below.
    """
    frequency_hz: float
    q: float
    sign: int = 1
    zero_ratio: float = 1.1

    def __post_init__(self):
        if self.frequency_hz <= 0 or self.q <= 0 or self.zero_ratio <= 0:
            raise ConfigurationError("resonance frequency, Q and zero ratio must be positive", ["resonances"])
        if self.sign not in (1, -1):
            raise ConfigurationError("resonance sign must be +1 or -1", ["resonances"])

    @property
    def zero_frequency_hz(self) -> float:
        return self.frequency_hz * self.zero_ratio ** self.sign


@dataclass(frozen=True)
class PlantModel:
    resonances: Tuple[Resonance, ...] = (Resonance(900.0, 8.0), Resonance(9000.0, 8.0))
    actuator: str = "multilayer"
    dc_gain: Optional[float] = None
    rolloff_hz: Optional[float] = 30e3
    linewidth_nm: float = linewidth_in_length(370e-6, 22e6, 897e-9)

    def __post_init__(self):
        if self.actuator not in ACTUATOR_STROKES:
            raise ConfigurationError(f"unknown actuator '{self.actuator}'", ["actuator"])
        if self.dc_gain is None:
            object.__setattr__(self, "dc_gain", ACTUATOR_STROKES[self.actuator])
        if self.dc_gain <= 0 or self.linewidth_nm <= 0:
            raise ConfigurationError("dc gain and linewidth must be positive", ["dc_gain", "linewidth_nm"])
        if self.rolloff_hz is not None and self.rolloff_hz <= 0:
            raise ConfigurationError("roll-off frequency must be positive", ["rolloff_hz"])
        freqs = [r.frequency_hz for r in self.resonances]
        if freqs != sorted(freqs):
            raise ConfigurationError("resonances must be sorted by frequency", ["resonances"])
        object.__setattr__(self, "resonances", tuple(self.resonances))

    @property
    def discriminant(self) -> float:
        """Error signal (linewidths) per nm of length detuning"""
        return 1.0 / self.linewidth_nm

    @property
    def highest_resonance_hz(self) -> float:
        return max((r.frequency_hz for r in self.resonances), default=0.0)


@dataclass(frozen=True)
class FilterSection:
    """Continuous prototype (gH s^2 + gB (w0/Q) s + gL w0^2) / (s^2 + (w0/Q) s + w0^2)"""
    frequency_hz: float
    q: float
    gain_low: float = 1.0
    gain_band: float = 1.0
    gain_high: float = 1.0

    def __post_init__(self):
        if self.frequency_hz <= 0 or self.q == 0:
            raise ConfigurationError("filter section needs a positive corner and non-zero Q", ["sections"])

    @classmethod
    def lowpass(cls, frequency_hz: float, q: float = 1.0 / np.sqrt(2.0)) -> "FilterSection":
        return cls(frequency_hz, q, gain_low=1.0, gain_band=0.0, gain_high=0.0)


@dataclass(frozen=True)
class LoopFilter:
    """Discrete biquads (b, a) in series with a Tustin PI, a scalar gain and a sample delay"""
    sections: Tuple[Tuple[np.ndarray, np.ndarray], ...]
    sample_rate: float
    pi_gains: Optional[Tuple[float, float]] = None
    gain: float = 1.0
    delay_samples: int = 1
    prototypes: Tuple[FilterSection, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ConfigurationError("sample rate must be positive", ["sample_rate_hz"])
        if self.delay_samples < 0:
            raise ConfigurationError("delay must be non-negative", ["delay_samples"])

    @property
    def dt(self) -> float:
        return 1.0 / self.sample_rate


@dataclass(frozen=True)
class NoiseModel:
    """Ornstein-Uhlenbeck length vibration plus white sensor noise, both in linewidths rms"""
    vibration_rms: float = 0.6
    vibration_corner_hz: float = 10.0
    sensor_rms: float = 0.2

    def __post_init__(self):
        if min(self.vibration_rms, self.sensor_rms) < 0 or self.vibration_corner_hz <= 0:
            raise ConfigurationError("noise levels must be non-negative", ["noise"])


@dataclass(frozen=True)
class LoopMargins:
    gain_margin_db: float
    phase_margin_deg: float
    unity_gain_hz: float
    phase_crossover_hz: Optional[float] = None

    def to_dict(self) -> Dict[str, Optional[float]]:
        def finite(v):
            return float(v) if v is not None and np.isfinite(v) else None
        return {
            "gain_margin_db": finite(self.gain_margin_db),
            "phase_margin_deg": finite(self.phase_margin_deg),
            "unity_gain_hz": finite(self.unity_gain_hz),
            "phase_crossover_hz": finite(self.phase_crossover_hz),
        }


@dataclass(frozen=True)
class LockResult:
    """Closed-loop residual (linewidths) and the open-loop trace under the same noise"""
    dt: float
    residual: np.ndarray
    open_loop: np.ndarray
    residual_std: float
    open_loop_std: float
    suppression_db: float
    capture_fraction: float
    settle_samples: int

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.residual.size)

    def to_dict(self) -> Dict[str, Optional[float]]:
        return {
            "residual_std_linewidths": float(self.residual_std),
            "open_loop_std_linewidths": float(self.open_loop_std),
            "suppression_db": float(self.suppression_db) if np.isfinite(self.suppression_db) else None,
            "capture_fraction": float(self.capture_fraction),
            "samples": int(self.residual.size),
        }
