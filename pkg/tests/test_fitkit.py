import numpy as np
import pytest
from scipy import integrate

from models.errors import FitError
from services.fitkit import (
    fit_fixed_frequency_sinusoid,
    fit_gaussian_1d,
    fit_gaussian_spot_2d,
    fit_line,
    fit_polynomial,
    fit_pseudo_voigt,
    fit_standing_wave,
    gauss_newton_engine,
    gaussian_1d,
    gaussian_2d,
    numeric_jacobian,
    pseudo_voigt_area,
    pseudo_voigt_profile,
    standing_wave,
    _pseudo_voigt_model,
)


def _quadrature_area(amplitude: float, sigma: float, gamma: float) -> float:
    area, _ = integrate.quad(lambda x: amplitude * pseudo_voigt_profile(x, 0.0, sigma, gamma), -np.inf, np.inf, limit=500)
    return area


def test_pseudo_voigt_area_gaussian_limit() -> None:
    assert pseudo_voigt_area(2.0, 1.5, 1e-9) == pytest.approx(2.0 * 1.5 * np.sqrt(2 * np.pi), rel=0.01)


def test_pseudo_voigt_area_lorentzian_limit() -> None:
    assert pseudo_voigt_area(2.0, 1e-9, 1.5) == pytest.approx(2.0 * np.pi * 1.5, rel=0.01)


def test_pseudo_voigt_area_matches_quadrature() -> None:
    assert pseudo_voigt_area(3.0, 1.0, 1.5) == pytest.approx(_quadrature_area(3.0, 1.0, 1.5), rel=0.01)


def test_fitted_spectral_area_matches_quadrature_on_a_noiseless_line() -> None:
    x = np.linspace(-12.0, 12.0, 25)
    y = 40.0 + 500.0 * pseudo_voigt_profile(x, 0.4, 1.0, 1.5)

    fit = fit_pseudo_voigt(x, y)

    assert fit.converged
    assert fit["center"] == pytest.approx(0.4, abs=1e-6)
    assert fit["offset"] == pytest.approx(40.0, rel=1e-4)
    assert fit["spectral_area"] == pytest.approx(_quadrature_area(500.0, 1.0, 1.5), rel=0.01)
    assert fit["spectral_area_error"] < 1e-3 * fit["spectral_area"]


@pytest.mark.parametrize(
    "model_fn, x, p",
    [
        (gaussian_1d, np.linspace(-20, 20, 41), np.array([120.0, 0.3, 8.5, 15.0])),
        (_pseudo_voigt_model, np.linspace(-10, 10, 25), np.array([0.2, 1.0, 1.5, 300.0, 20.0])),
        (lambda x, p: standing_wave(x, p, 5.0), np.linspace(-0.5, 0.5, 41), np.array([40.0, 0.8, 0.05, 0.6])),
        (gaussian_2d, np.vstack([c.ravel() for c in np.indices((12, 16), dtype=float)[::-1]]), np.array([50.0, 7.3, 5.1, 1.2, 0.9, 2.0])),
    ],
)
def test_numeric_jacobians_agree_with_central_differences(model_fn, x, p) -> None:
    forward = numeric_jacobian(model_fn, x, p)
    central = numeric_jacobian(model_fn, x, p, step_scale=2.0, central=True)

    assert np.allclose(forward, central, rtol=1e-6, atol=1e-6 * np.abs(central).max())


def test_linear_model_converges_to_normal_equations() -> None:
    rng = np.random.default_rng(4)
    x = np.linspace(0.0, 10.0, 30)
    y = 1.5 - 0.7 * x + rng.normal(0.0, 0.1, x.size)

    fit = gauss_newton_engine(lambda xx, p: p[0] + p[1] * xx, [0.0, 0.0], x, y, param_names=["b", "m"])
    slope, intercept = np.polyfit(x, y, 1)

    assert fit.iterations <= 2
    assert fit["m"] == pytest.approx(slope, rel=1e-6)
    assert fit["b"] == pytest.approx(intercept, rel=1e-6)


def test_fits_do_not_depend_on_point_order() -> None:
    rng = np.random.default_rng(8)
    x = np.linspace(-20.0, 20.0, 41)
    y = gaussian_1d(x, np.array([120.0, 0.3, 8.5, 15.0])) + rng.normal(0.0, 2.0, x.size)
    order = rng.permutation(x.size)

    poly, poly_shuffled = fit_polynomial(x, y, 2), fit_polynomial(x[order], y[order], 2)
    gauss, gauss_shuffled = fit_gaussian_1d(x, y), fit_gaussian_1d(x[order], y[order])

    assert np.allclose(poly.values, poly_shuffled.values, rtol=1e-9)
    assert np.allclose(gauss.values, gauss_shuffled.values, rtol=1e-6)


def test_quadratic_covariance_predicts_scatter() -> None:
    x = np.linspace(0.0, 200.0, 21)
    truth = 6.1e-5 * x**2 - 0.1 * x
    sigma = 0.05
    estimates, predicted = [], []
    for seed in range(300):
        y = truth + np.random.default_rng([5, seed]).normal(0.0, sigma, x.size)
        fit = fit_polynomial(x, y, 2, through_origin=True, sigma=sigma)
        estimates.append(fit["c2"])
        predicted.append(fit.errors["c2"])

    assert np.std(estimates) == pytest.approx(np.mean(predicted), rel=0.2)
    assert abs(np.mean(estimates) - 6.1e-5) < 4 * np.mean(predicted) / np.sqrt(300)


def test_covariance_scales_inversely_with_replication() -> None:
    rng = np.random.default_rng(2)
    x = np.linspace(0.0, 1.0, 15)
    y = 2.0 + 3.0 * x + rng.normal(0.0, 0.1, x.size)

    single = fit_line(x, y, sigma=0.1)
    replicated = fit_line(np.tile(x, 4), np.tile(y, 4), sigma=0.1)

    assert np.allclose(single.covariance / replicated.covariance, 4.0, rtol=1e-9)


def test_through_origin_fit_has_no_constant_term() -> None:
    x = np.linspace(0.0, 200.0, 21)
    fit = fit_polynomial(x, 6.1e-5 * x**2 - 0.1 * x, 2, through_origin=True)

    assert fit.names == ["c1", "c2"]
    assert fit["c2"] == pytest.approx(6.1e-5, rel=1e-9)
    assert fit["r_squared"] == pytest.approx(1.0)


def test_polynomial_needs_more_points_than_degree() -> None:
    with pytest.raises(FitError):
        fit_polynomial([0.0, 1.0], [1.0, 2.0], 2)


def test_flat_offset_has_zero_sinusoid_amplitude() -> None:
    theta = np.linspace(0, 2 * np.pi, 16, endpoint=False) + np.pi / 16

    fit = fit_fixed_frequency_sinusoid(theta, np.full(16, 1e4))

    assert fit["amplitude"] == pytest.approx(0.0, abs=1e-9)
    assert fit["offset"] == pytest.approx(1e4)


def test_poisson_sinusoid_amplitude_within_three_sigma() -> None:
    theta = np.linspace(0, 2 * np.pi, 16, endpoint=False) + np.pi / 16
    mean = 1e4 * (1 + 0.05 * np.cos(theta - 0.3))
    inside = 0
    for seed in range(50):
        counts = np.random.default_rng([9, seed]).poisson(mean).astype(float)
        fit = fit_fixed_frequency_sinusoid(theta, counts, reference_phase=0.3, sigma=np.sqrt(counts))
        inside += abs(fit["amplitude"] - 500.0) < 3 * fit.errors["amplitude"]

    assert inside >= 45


def test_sinusoid_amplitude_sign_follows_reference_phase() -> None:
    theta = np.linspace(0, 2 * np.pi, 16, endpoint=False)
    counts = 100 + 10 * np.cos(theta - 0.2)

    assert fit_fixed_frequency_sinusoid(theta, counts, reference_phase=0.0)["amplitude"] == pytest.approx(10.0)
    assert fit_fixed_frequency_sinusoid(theta, counts, reference_phase=np.pi)["amplitude"] == pytest.approx(-10.0)


def test_free_frequency_sinusoid_recovers_unit_frequency() -> None:
    theta = np.linspace(0, 2 * np.pi, 32, endpoint=False)
    counts = 100 + 10 * np.cos(theta - 0.2)

    fit = fit_fixed_frequency_sinusoid(theta, counts, frequency_known=False)

    assert fit["frequency"] == pytest.approx(1.0, rel=1e-6)


def test_sinusoid_needs_a_full_period_of_bins() -> None:
    with pytest.raises(FitError):
        fit_fixed_frequency_sinusoid(np.linspace(0, 2 * np.pi, 6, endpoint=False), np.ones(6))
    with pytest.raises(FitError):
        fit_fixed_frequency_sinusoid(np.linspace(0, np.pi, 10), np.ones(10))


def test_gaussian_profile_recovers_waist() -> None:
    x = np.linspace(-20.0, 20.0, 19)
    fit = fit_gaussian_1d(x, gaussian_1d(x, np.array([300.0, -3.9, 8.5, 20.0])))

    assert fit["waist"] == pytest.approx(8.5, rel=1e-6)
    assert fit["center"] == pytest.approx(-3.9, abs=1e-6)


def test_flat_profile_is_flagged_unconverged() -> None:
    fit = fit_gaussian_1d(np.linspace(0.0, 1.0, 7), np.full(7, 3.0))

    assert not fit.converged


def test_standing_wave_fit_recovers_period_and_visibility() -> None:
    x = np.linspace(-0.5, 0.5, 41)
    y = standing_wave(x, np.array([40.0, 0.83, 0.07, 0.216]), background=42.0)

    fit = fit_standing_wave(x, y, background=42.0, period_guess=0.21)

    assert fit["period"] == pytest.approx(0.216, rel=1e-6)
    assert fit["visibility"] == pytest.approx(0.83, rel=1e-6)


def test_blank_frame_has_no_spot() -> None:
    with pytest.raises(FitError):
        fit_gaussian_spot_2d(np.full((20, 20), 3.0))
