"""
Optical records: cavity mode, laser and emission parameters, photon streams, camera
"""
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from models.errors import CavityStabilityError, GeometryError


def two_mirror_mode(length: float, roc_upper: float, roc_lower: float, wavelength: float) -> Tuple[float, float, float]:
    """(waist, Rayleigh range, waist distance from the upper mirror) of a two-mirror resonator"""
    g1 = 1.0 - length / roc_upper
    g2 = 1.0 - length / roc_lower
    product = g1 * g2
    if not 0.0 < product < 1.0:
        raise CavityStabilityError(
            f"unstable resonator: g1*g2 = {product:.6g} outside (0, 1)", stability_product=product
        )
    denom = g1 + g2 - 2.0 * product
    rayleigh = np.sqrt(length**2 * product * (1.0 - product) / denom**2)
    waist = np.sqrt(rayleigh * wavelength / np.pi)
    from_upper = length * g2 * (1.0 - g1) / denom
    return float(waist), float(rayleigh), float(from_upper)


@dataclass(frozen=True)
class CavityMode:
    """Standing-wave TEM00 mode along z.

    antinode_offset shifts the standing wave along z; axis_offset is the
    (x, y) position of the mode axis at the trap centre; waist_position is
    the axial waist location relative to the trap centre.
    """
    wavelength: float
    length: float
    roc_upper: float
    roc_lower: float
    waist: float
    rayleigh_range: float
    antinode_offset: float = 0.0
    g0: Optional[float] = None
    axis_offset: Tuple[float, float] = (0.0, 0.0)
    waist_position: float = 0.0
    finesse: Optional[float] = None

    def __post_init__(self):
        waist, rayleigh, _ = two_mirror_mode(self.length, self.roc_upper, self.roc_lower, self.wavelength)
        if abs(waist - self.waist) > 1e-9 * waist or abs(rayleigh - self.rayleigh_range) > 1e-9 * rayleigh:
            raise GeometryError("waist and Rayleigh range inconsistent with length, ROCs and wavelength")
        object.__setattr__(self, "axis_offset", tuple(float(v) for v in self.axis_offset))

    @property
    def wavenumber(self) -> float:
        return 2.0 * np.pi / self.wavelength


@dataclass(frozen=True)
class LaserParams:
    """Doppler-cooling beam; rates in rad/s"""
    detuning: float
    linewidth: float
    saturation: float = 1.0
    k_vector: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    efficiency: float = 1.0

    def __post_init__(self):
        if self.linewidth <= 0:
            raise GeometryError("laser linewidth must be positive")
        object.__setattr__(self, "k_vector", tuple(float(v) for v in self.k_vector))


@dataclass(frozen=True)
class EmissionParams:
    """Cavity emission line: widths in rad/s (Lorentzian HWHM, Gaussian sigma)"""
    peak_rate: float
    lorentzian_width: float
    gaussian_width: float
    background_rate: float = 4200.0

    def __post_init__(self):
        if self.lorentzian_width <= 0 or self.gaussian_width <= 0:
            raise GeometryError("emission line widths must be positive")


@dataclass(frozen=True)
class PhotonStream:
    window: Tuple[float, float]
    arrivals: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        arrivals = np.asarray(self.arrivals, dtype=float)
        object.__setattr__(self, "arrivals", arrivals)
        t0, t1 = self.window
        if arrivals.size and (np.any(np.diff(arrivals) <= 0) or arrivals[0] < t0 or arrivals[-1] > t1):
            raise ValueError("arrivals must be strictly increasing and inside the window")

    @property
    def count(self) -> int:
        return int(self.arrivals.size)

    @property
    def duration(self) -> float:
        return self.window[1] - self.window[0]


@dataclass(frozen=True)
class CameraModel:
    """Imaging camera; object-space lengths in metres"""
    pixel_pitch_object: float = 2.0e-6
    psf_sigma: float = 1.5e-6
    counts_per_photon: float = 1.0
    dark_rate: float = 0.5
    sensor_extent: Tuple[int, int] = (64, 48)

    def __post_init__(self):
        if min(self.pixel_pitch_object, self.psf_sigma, self.counts_per_photon) <= 0 or self.dark_rate < 0:
            raise GeometryError("camera parameters must be positive")
        if self.psf_sigma < self.pixel_pitch_object / 4:
            raise GeometryError("psf_sigma must be at least a quarter pixel")
        if min(self.sensor_extent) < 3:
            raise GeometryError("sensor must be at least 3x3 pixels")

    @property
    def sensor_center(self) -> Tuple[float, float]:
        """(x, y) pixel coordinate that images the object origin"""
        nx, ny = self.sensor_extent
        return (nx - 1) / 2.0, (ny - 1) / 2.0
