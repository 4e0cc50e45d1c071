"""
Ion motion records: trajectories, micromotion phasors and phase-mismatch parameters
"""
from dataclasses import dataclass

import numpy as np

from models.errors import ConfigurationError


@dataclass(frozen=True)
class Trajectory:
    """Uniformly sampled positions (m) and velocities (m/s)"""
    t0: float
    dt: float
    positions: np.ndarray
    velocities: np.ndarray

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=float)
        velocities = np.asarray(self.velocities, dtype=float)
        if self.dt <= 0:
            raise ConfigurationError("trajectory dt must be positive", ["dt"])
        if positions.ndim != 2 or positions.shape[1] != 3 or positions.shape != velocities.shape:
            raise ConfigurationError("positions and velocities must be matching (n, 3) arrays", ["positions"])
        if positions.shape[0] < 2:
            raise ConfigurationError("trajectory needs at least two samples", ["positions"])
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "velocities", velocities)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self))

    @property
    def duration(self) -> float:
        return self.dt * (len(self) - 1)


@dataclass(frozen=True)
class MicromotionPhasor:
    """Per-axis x_k(t) = offset_k + amplitude_k cos(omega t + phase_k)"""
    amplitudes: np.ndarray
    phases: np.ndarray
    offsets: np.ndarray

    def signed_amplitude(self, axis: int, reference_phase: float) -> float:
        """Amplitude projected on a reference phase; flips sign with the micromotion polarity"""
        return float(self.amplitudes[axis] * np.cos(self.phases[axis] - reference_phase))


@dataclass(frozen=True)
class MismatchParams:
    """First-order phase-mismatch micromotion inputs: q, R (m), alpha, delta (rad), omega (rad/s)"""
    q: float
    R: float
    alpha: float
    delta: float
    omega: float

    def __post_init__(self):
        if not 0.0 < self.q < 0.9:
            raise ConfigurationError(f"q={self.q} outside (0, 0.9)", ["q"])
        if self.R <= 0 or self.omega <= 0:
            raise ConfigurationError("R and omega must be positive", ["R", "omega"])
