import numpy as np
import pytest

from models.errors import CavityStabilityError, ModelValidityError, RateCapError
from models.optics import CameraModel, EmissionParams, LaserParams
from services.fitkit import fit_fixed_frequency_sinusoid, fit_gaussian_spot_2d
from services.optics import (
    cavity_emission_rate,
    cavity_mode_from_geometry,
    fluorescence_rate,
    fold_arrivals,
    mean_mode_intensity,
    mode_amplitude,
    nearest_antinode,
    render_ion_image,
    sample_photon_arrivals,
)

UM = 1e-6
NM = 1e-9
OMEGA = 2 * np.pi * 20e6


@pytest.fixture
def mode():
    return cavity_mode_from_geometry(370 * UM, 560 * UM, 560 * UM, 866 * NM)


def test_symmetric_cavity_waist(mode) -> None:
    assert mode.waist == pytest.approx(8.5 * UM, rel=0.01)
    assert mode.waist_position == pytest.approx(0.0, abs=1e-15)


def test_unstable_resonator_is_rejected() -> None:
    with pytest.raises(CavityStabilityError) as excinfo:
        cavity_mode_from_geometry(370 * UM, 100 * UM, 100 * UM, 866 * NM)
    assert not 0 < excinfo.value.stability_product < 1


def test_mode_amplitude_is_bounded_with_unit_antinode(mode) -> None:
    z = np.linspace(-2 * UM, 2 * UM, 20001)
    points = np.column_stack([np.zeros_like(z), np.zeros_like(z), z])
    psi = mode_amplitude(mode, points)

    assert np.all(np.abs(psi) <= 1.0)
    assert mode_amplitude(mode, [0.0, 0.0, nearest_antinode(mode, 50 * NM)]) == pytest.approx(1.0, abs=1e-9)


def test_antinodes_are_half_a_wavelength_apart(mode) -> None:
    first = nearest_antinode(mode, 0.0)
    second = nearest_antinode(mode, first + 0.5 * 866 * NM)

    assert second - first == pytest.approx(433 * NM, rel=1e-3)


def test_averaged_intensity_matches_closed_form(mode) -> None:
    z_mean, sigma_z = 100 * NM, 42 * NM
    nodes, weights = np.polynomial.hermite_e.hermegauss(80)
    z = z_mean + sigma_z * nodes
    points = np.column_stack([np.zeros_like(z), np.zeros_like(z), z])
    numeric = np.sum(weights * mode_amplitude(mode, points) ** 2) / np.sqrt(2 * np.pi)

    assert mean_mode_intensity(mode, z_mean, sigma_z) == pytest.approx(numeric, abs=1e-6)


def test_doppler_modulation_of_fluorescence() -> None:
    gamma = 2 * np.pi * 21.6e6
    k = 2 * np.pi / 397e-9
    laser = LaserParams(detuning=-0.5 * gamma, linewidth=gamma, saturation=1.0, k_vector=(0.0, k, 0.0))
    theta = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    velocity = np.column_stack([np.zeros_like(theta), 0.2 * gamma / k * np.cos(theta), np.zeros_like(theta)])

    fit = fit_fixed_frequency_sinusoid(theta, fluorescence_rate(laser, velocity))
    depth = abs(fit["amplitude"]) / fit["offset"]

    assert fluorescence_rate(laser, np.zeros(3)) == pytest.approx(gamma / 6)
    assert depth == pytest.approx(0.2 * 4 / 3, rel=0.05)


def test_cavity_emission_peaks_at_the_antinode(mode) -> None:
    params = EmissionParams(peak_rate=3e4, lorentzian_width=2 * np.pi * 1.5e6, gaussian_width=2 * np.pi * 1e6)

    assert cavity_emission_rate(mode, [0.0, 0.0, 0.0], 0.0, params) == pytest.approx(3e4 + 4200.0)
    node = cavity_emission_rate(mode, [0.0, 0.0, 866 * NM / 4], 0.0, params)
    assert node == pytest.approx(4200.0, abs=1.0)


def test_constant_rate_thinning_has_poisson_mean() -> None:
    counts = [
        sample_photon_arrivals(lambda t: np.full_like(t, 1e4), (0.0, 1.0), 2e4, seed=[1, s]).count
        for s in range(100)
    ]

    assert np.mean(counts) == pytest.approx(1e4, abs=3 * 100 / np.sqrt(100))


def test_arrivals_are_sorted_inside_the_window() -> None:
    stream = sample_photon_arrivals(lambda t: 5e3 * (1 + np.cos(OMEGA * t)), (0.1, 0.2), 1e4, seed=3)

    assert np.all(np.diff(stream.arrivals) > 0)
    assert stream.arrivals[0] >= 0.1 and stream.arrivals[-1] <= 0.2


def test_folded_modulation_depth_is_recovered() -> None:
    rate, depth, bins = 1e4, 0.5, 16
    stream = sample_photon_arrivals(lambda t: rate * (1 + depth * np.cos(OMEGA * t)), (0.0, 1.0), rate * 1.5, seed=11)
    centers, counts = fold_arrivals(stream, OMEGA, bins)

    fit = fit_fixed_frequency_sinusoid(centers, counts, sigma=np.sqrt(np.maximum(counts, 1.0)))
    expected = depth * rate / bins * np.sinc(1 / bins)

    assert counts.sum() == stream.count
    assert abs(fit["amplitude"] - expected) < 3 * fit.errors["amplitude"]
    assert abs(fit["phase"]) < 0.1


def test_rate_above_cap_is_refused() -> None:
    with pytest.raises(RateCapError) as excinfo:
        sample_photon_arrivals(lambda t: np.full_like(t, 2e4), (0.0, 0.01), 1e4, seed=0)
    assert excinfo.value.observed_rate == pytest.approx(2e4)


def test_rendered_spot_centroid_matches_input() -> None:
    camera = CameraModel(dark_rate=0.0)
    cx, cy = camera.sensor_center
    target = (32.5, 20.25)
    position = ((target[0] - cx) * camera.pixel_pitch_object, (target[1] - cy) * camera.pixel_pitch_object)

    frame = render_ion_image(position, 0.0, camera, exposure=1.0, photon_rate=1e6, seed=5)
    fit = fit_gaussian_spot_2d(frame, camera)

    assert frame.shape == (48, 64)
    assert fit["x0"] == pytest.approx(target[0], abs=0.05)
    assert fit["y0"] == pytest.approx(target[1], abs=0.05)
    assert fit["x0_m"] == pytest.approx(position[0], abs=0.05 * camera.pixel_pitch_object)


def test_spot_outside_sensor_is_refused() -> None:
    with pytest.raises(ModelValidityError):
        render_ion_image((1e-3, 0.0), 0.0, CameraModel(), exposure=0.1, photon_rate=1e4, seed=0)
