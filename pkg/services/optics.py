"""
Optics Service - cavity mode, emission rates, photon sampling and camera frames
"""
import logging
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from models.errors import GeometryError, ModelValidityError, RateCapError, SimulationError
from models.optics import (
    CameraModel,
    CavityMode,
    EmissionParams,
    LaserParams,
    PhotonStream,
    two_mirror_mode,
)
from services.fitkit import pseudo_voigt_profile

logger = logging.getLogger(__name__)

SeedLike = Union[int, Sequence[int], np.random.SeedSequence, None]
MIN_CAVITY_LENGTH = 1e-6


def cavity_mode_from_geometry(
    length: float,
    roc_upper: float,
    roc_lower: float,
    wavelength: float,
    antinode_offset: float = 0.0,
    axis_offset: Tuple[float, float] = (0.0, 0.0),
    g0: Optional[float] = None,
    finesse: Optional[float] = None,
) -> CavityMode:
    """
    Gaussian mode of a two-mirror fibre cavity

    Args:
        length: mirror separation (m)
        roc_upper, roc_lower: mirror radii of curvature (m)
        wavelength: vacuum wavelength (m)

    Returns:
        CavityMode with the waist placed relative to the cavity centre
    """
    if length < MIN_CAVITY_LENGTH:
        raise GeometryError(f"cavity length {length:.3g} m is degenerate (below 1 um)")
    waist, rayleigh, from_upper = two_mirror_mode(length, roc_upper, roc_lower, wavelength)
    mode = CavityMode(
        wavelength=wavelength,
        length=length,
        roc_upper=roc_upper,
        roc_lower=roc_lower,
        waist=waist,
        rayleigh_range=rayleigh,
        antinode_offset=antinode_offset,
        g0=g0,
        axis_offset=axis_offset,
        waist_position=length / 2.0 - from_upper,
        finesse=finesse,
    )
    logger.info(f"Cavity mode: w0={waist * 1e6:.3f} um, zR={rayleigh * 1e6:.1f} um")
    return mode


def _split(position) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    r = np.asarray(position, dtype=float)
    return r[..., 0], r[..., 1], r[..., 2]


def mode_phase(mode: CavityMode, z) -> np.ndarray:
    """Standing-wave phase k z - Gouy(z) + k * antinode_offset"""
    zc = np.asarray(z, dtype=float) - mode.waist_position
    return mode.wavenumber * zc - np.arctan(zc / mode.rayleigh_range) + mode.wavenumber * mode.antinode_offset


def mode_phase_slope(mode: CavityMode, z) -> np.ndarray:
    zc = np.asarray(z, dtype=float) - mode.waist_position
    return mode.wavenumber - mode.rayleigh_range / (mode.rayleigh_range**2 + zc**2)


def _envelope(mode: CavityMode, x, y, z):
    zc = z - mode.waist_position
    w = mode.waist * np.sqrt(1.0 + (zc / mode.rayleigh_range) ** 2)
    rho2 = (x - mode.axis_offset[0]) ** 2 + (y - mode.axis_offset[1]) ** 2
    return mode.waist / w, rho2 / w**2


def mode_amplitude(mode: CavityMode, r) -> np.ndarray:
    """
    Normalized standing-wave field psi in [-1, 1] at position(s) r (..., 3)
    """
    x, y, z = _split(r)
    if np.any(np.abs(z) >= mode.length / 2.0):
        raise ModelValidityError(
            "position outside the cavity", np.atleast_1d(np.asarray(r, dtype=float).reshape(-1, 3)[0]), mode.length / 2.0
        )
    ratio, rho_term = _envelope(mode, x, y, z)
    return ratio * np.cos(mode_phase(mode, z)) * np.exp(-rho_term)


def nearest_antinode(mode: CavityMode, z_guess: float) -> float:
    """Axial position of the antinode closest to z_guess"""
    order = np.round(mode_phase(mode, z_guess) / np.pi)
    z = float(z_guess)
    for _ in range(8):
        z -= float((mode_phase(mode, z) - order * np.pi) / mode_phase_slope(mode, z))
    return z


def mean_mode_intensity(mode: CavityMode, z_mean: float, sigma_z: float, rho: float = 0.0) -> float:
    """
    psi^2 averaged over a Gaussian axial spread sigma_z around z_mean

    Closed form 1/2 (1 + exp(-2 k'^2 sigma^2) cos 2 theta(z_mean)) times the
    transverse envelope, with k' the local phase slope.
    """
    ratio, rho_term = _envelope(mode, mode.axis_offset[0] + rho, mode.axis_offset[1], np.asarray(z_mean, dtype=float))
    slope = mode_phase_slope(mode, z_mean)
    contrast = np.exp(-2.0 * slope**2 * sigma_z**2)
    standing = 0.5 * (1.0 + contrast * np.cos(2.0 * mode_phase(mode, z_mean)))
    return float(ratio**2 * np.exp(-2.0 * rho_term) * standing)


def fluorescence_rate(laser: LaserParams, velocity) -> np.ndarray:
    """
    Detected scattering rate for ion velocity (..., 3), first-order Doppler only

    rate = efficiency * Gamma/2 * s / (1 + s + (2 (Delta - k.v) / Gamma)^2)
    """
    v = np.asarray(velocity, dtype=float)
    doppler = v @ np.asarray(laser.k_vector)
    detuning = laser.detuning - doppler
    s = laser.saturation
    return laser.efficiency * 0.5 * laser.linewidth * s / (1.0 + s + (2.0 * detuning / laser.linewidth) ** 2)


def cavity_emission_rate(mode: CavityMode, position, cavity_detuning, params: EmissionParams) -> np.ndarray:
    """Background plus mode-weighted pseudo-Voigt emission line (counts/s)"""
    psi = mode_amplitude(mode, position)
    line = pseudo_voigt_profile(cavity_detuning, 0.0, params.gaussian_width, params.lorentzian_width)
    return params.background_rate + params.peak_rate * psi**2 * line


def sample_photon_arrivals(
    rate_fn: Callable[[np.ndarray], np.ndarray],
    window: Tuple[float, float],
    rate_cap: float,
    seed: SeedLike,
) -> PhotonStream:
    """
    Inhomogeneous Poisson arrivals by thinning a homogeneous process at rate_cap

    Args:
        rate_fn: vectorized time -> rate (1/s)
        window: (t_start, t_end) in seconds
        rate_cap: envelope rate, must bound rate_fn on the window
        seed: RNG seed or seed sequence

    Returns:
        PhotonStream of sorted, strictly increasing arrival times
    """
    t0, t1 = window
    if t1 < t0:
        raise SimulationError(f"window end {t1} precedes start {t0}")
    if rate_cap < 0:
        raise SimulationError("rate cap must be non-negative")
    rng = np.random.default_rng(seed)
    n_candidates = rng.poisson(rate_cap * (t1 - t0))
    candidates = np.sort(rng.uniform(t0, t1, n_candidates))
    if n_candidates == 0:
        return PhotonStream(window=(t0, t1), arrivals=np.zeros(0))

    rates = np.asarray(rate_fn(candidates), dtype=float)
    peak = float(rates.max())
    if peak > rate_cap * (1.0 + 1e-9):
        raise RateCapError(
            f"rate {peak:.6g}/s exceeds thinning cap {rate_cap:.6g}/s", observed_rate=peak, rate_cap=rate_cap
        )
    if rates.min() < 0:
        raise SimulationError(f"negative rate {rates.min():.3g}/s from rate function")

    keep = rng.uniform(0.0, rate_cap, n_candidates) < rates
    arrivals = np.unique(candidates[keep])
    logger.debug(f"Thinning kept {arrivals.size} of {n_candidates} candidates")
    return PhotonStream(window=(t0, t1), arrivals=arrivals)


def fold_arrivals(stream: PhotonStream, omega: float, n_bins: int, phase_offset: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    """RF-correlation histogram: counts per drive-phase bin, with bin centres in rad"""
    phase = np.mod(omega * stream.arrivals + phase_offset, 2.0 * np.pi)
    edges = np.linspace(0.0, 2.0 * np.pi, n_bins + 1)
    counts, _ = np.histogram(phase, bins=edges)
    return 0.5 * (edges[:-1] + edges[1:]), counts.astype(float)


def render_ion_image(
    mean_position: Sequence[float],
    position_sigma,
    camera: CameraModel,
    exposure: float,
    photon_rate: float,
    seed: SeedLike,
) -> np.ndarray:
    """
    Simulated camera frame of a single ion

    Args:
        mean_position: object-plane (x, y) in metres, origin imaged at the sensor centre
        position_sigma: ion position spread (m), scalar or per axis
        camera: camera model
        exposure: seconds
        photon_rate: detected photons per second
        seed: RNG seed

    Returns:
        (rows, columns) array of counts
    """
    nx, ny = camera.sensor_extent
    cx, cy = camera.sensor_center
    pitch = camera.pixel_pitch_object
    px = cx + mean_position[0] / pitch
    py = cy + mean_position[1] / pitch
    if not (0.0 <= px <= nx - 1 and 0.0 <= py <= ny - 1):
        raise ModelValidityError("ion image outside the sensor", mean_position, max(nx, ny) * pitch / 2)

    sigma = np.broadcast_to(np.asarray(position_sigma, dtype=float), (2,))
    spread = np.sqrt(sigma**2 + camera.psf_sigma**2) / pitch

    rng = np.random.default_rng(seed)
    n_photons = rng.poisson(photon_rate * exposure) if exposure > 0 else 0
    xs = rng.normal(px, spread[0], n_photons)
    ys = rng.normal(py, spread[1], n_photons)
    photons, _, _ = np.histogram2d(ys, xs, bins=[ny, nx], range=[[-0.5, ny - 0.5], [-0.5, nx - 0.5]])
    dark = rng.poisson(camera.dark_rate * max(exposure, 0.0), size=(ny, nx))
    return camera.counts_per_photon * (photons + dark)
