"""
Exception hierarchy for the trap simulator
"""
from typing import Iterable, Optional, Sequence


class SimulationError(Exception):
    """Base class for every failure raised by the simulator"""


class ConfigurationError(SimulationError):
    """Invalid or inconsistent configuration"""

    def __init__(self, message: str, keys: Optional[Iterable[str]] = None):
        self.keys = list(keys or [])
        super().__init__(message)


class GeometryError(SimulationError):
    """Invalid electrode/cavity geometry or discretization"""


class CavityStabilityError(GeometryError):
    """Two-mirror resonator outside the stability range"""

    def __init__(self, message: str, stability_product: float):
        self.stability_product = stability_product
        super().__init__(message)


class ConvergenceError(SimulationError):
    """Relaxation solver hit its sweep cap"""

    def __init__(self, message: str, residual: float, iterations: int):
        self.residual = residual
        self.iterations = iterations
        super().__init__(message)


class ModelValidityError(SimulationError):
    """Position outside the region where the harmonic expansion holds"""

    def __init__(self, message: str, position: Sequence[float], radius: float):
        self.position = tuple(float(p) for p in position)
        self.radius = radius
        super().__init__(message)


class PhaseMismatchError(SimulationError):
    """Drive sources are not in phase, so no true RF null exists"""

    def __init__(self, message: str, imaginary_ratio: float):
        self.imaginary_ratio = imaginary_ratio
        super().__init__(message)


class NullSearchError(SimulationError):
    """Newton search for the RF null diverged"""

    def __init__(self, message: str, last_iterate: Sequence[float]):
        self.last_iterate = tuple(float(p) for p in last_iterate)
        super().__init__(message)


class UnstableConfigurationError(SimulationError):
    """Non-confining trap, unstable filter section or diverging loop"""


class CalibrationError(SimulationError):
    """Calibration targets missing or inconsistent"""

    def __init__(self, message: str, missing: Optional[Iterable[str]] = None):
        self.missing = list(missing or [])
        super().__init__(message)


class TrajectoryEscapeError(SimulationError):
    """Ion left the model validity ball during integration"""

    def __init__(self, message: str, escape_time: float):
        self.escape_time = escape_time
        super().__init__(message)


class RateCapError(SimulationError):
    """Rate function exceeded the thinning envelope"""

    def __init__(self, message: str, observed_rate: float, rate_cap: float):
        self.observed_rate = observed_rate
        self.rate_cap = rate_cap
        super().__init__(message)


class FitError(SimulationError):
    """Least-squares problem cannot be set up or solved"""


class LoopAnalysisError(SimulationError):
    """Open-loop response has no unity-gain crossing"""
