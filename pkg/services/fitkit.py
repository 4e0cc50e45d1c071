"""
Fit Kit Service - deterministic least-squares machinery
"""
import logging
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from models.errors import FitError
from models.fits import FitResult
from models.optics import CameraModel

logger = logging.getLogger(__name__)

ModelFn = Callable[[np.ndarray, np.ndarray], np.ndarray]

_SQRT_EPS = np.sqrt(np.finfo(float).eps)
_FWHM_PER_SIGMA = 2.0 * np.sqrt(2.0 * np.log(2.0))
MAX_ITERATIONS = 200


def numeric_jacobian(model_fn: ModelFn, x: np.ndarray, p: np.ndarray, step_scale: float = 1.0, central: bool = False) -> np.ndarray:
    """Finite-difference Jacobian, step sqrt(eps)*max(|p|, 1) per parameter"""
    p = np.asarray(p, dtype=float)
    f0 = None if central else np.asarray(model_fn(x, p), dtype=float)
    columns = []
    for k in range(p.size):
        h = step_scale * _SQRT_EPS * max(abs(p[k]), 1.0)
        forward = p.copy()
        forward[k] += h
        if central:
            backward = p.copy()
            backward[k] -= h
            columns.append((model_fn(x, forward) - model_fn(x, backward)) / (2.0 * h))
        else:
            columns.append((model_fn(x, forward) - f0) / h)
    return np.column_stack(columns)


def _weights(sigma, n: int) -> Tuple[np.ndarray, bool]:
    if sigma is None:
        return np.ones(n), False
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (n,))
    if np.any(sigma <= 0) or not np.all(np.isfinite(sigma)):
        raise FitError("sigma must be finite and positive")
    return 1.0 / sigma, True


def _covariance(jac_w: np.ndarray, cost: float, n: int, absolute: bool) -> np.ndarray:
    m = jac_w.shape[1]
    cov = np.linalg.pinv(jac_w.T @ jac_w)
    if not absolute:
        cov = cov * (cost / max(n - m, 1))
    return 0.5 * (cov + cov.T)


def gauss_newton_engine(
    model_fn: ModelFn,
    initial: Sequence[float],
    x: np.ndarray,
    y: np.ndarray,
    sigma=None,
    param_names: Optional[Sequence[str]] = None,
    xtol: float = 1e-10,
    ftol: float = 1e-15,
    max_iterations: int = MAX_ITERATIONS,
) -> FitResult:
    """
    Damped Gauss-Newton with Marquardt diagonal damping

    Undamped steps are tried first; damping grows tenfold on every rejected
    step and shrinks tenfold on every accepted one.

    Args:
        model_fn: f(x, p) -> predictions shaped like y
        initial: starting parameters
        x, y: data
        sigma: optional per-point standard deviations (absolute covariance)
        param_names: names for FitResult.params
        xtol: relative parameter-update threshold
        ftol: relative cost-stagnation threshold
        max_iterations: iteration cap; exceeding it returns a flagged best-so-far

    Returns:
        FitResult
    """
    p = np.array(initial, dtype=float)
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
        raise FitError("non-finite values in data or initial parameters")
    names = list(param_names) if param_names is not None else [f"p{k}" for k in range(p.size)]
    if len(names) != p.size:
        raise FitError("param_names length does not match the parameter count")

    w, absolute = _weights(sigma, y.size)

    def residual(params: np.ndarray) -> np.ndarray:
        return (y - np.asarray(model_fn(x, params), dtype=float)) * w

    r = residual(p)
    cost = float(r @ r)
    if not np.isfinite(cost):
        raise FitError("model is not finite at the initial parameters")

    lam = 0.0
    converged = cost == 0.0
    iterations = 0
    while not converged and iterations < max_iterations:
        iterations += 1
        jac = numeric_jacobian(model_fn, x, p) * w[:, None]
        grad = jac.T @ r
        normal = jac.T @ jac
        diag = np.diag(normal).copy()
        diag[diag <= 0] = max(diag.max(), 1.0) * 1e-12

        accepted = False
        while lam < 1e16:
            try:
                step = linalg.solve(normal + lam * np.diag(diag), grad, assume_a="sym")
            except (linalg.LinAlgError, ValueError):
                step = None
            if step is not None and np.all(np.isfinite(step)):
                trial = p + step
                r_trial = residual(trial)
                cost_trial = float(r_trial @ r_trial)
                if np.isfinite(cost_trial) and cost_trial <= cost:
                    accepted = True
                    break
            lam = 1e-3 if lam == 0.0 else lam * 10.0

        if not accepted:
            # no downhill step left at machine precision
            converged = True
            break

        rel_step = np.linalg.norm(step) / (np.linalg.norm(p) + xtol)
        rel_cost = (cost - cost_trial) / cost if cost > 0 else 0.0
        p, r, cost = trial, r_trial, cost_trial
        lam = lam / 10.0 if lam > 1e-12 else 0.0
        logger.debug(f"LM iteration {iterations}: cost {cost:.6e}, step {rel_step:.3e}")
        if rel_step < xtol or cost == 0.0 or (rel_cost < ftol and rel_step < np.sqrt(xtol)):
            converged = True

    if not converged:
        logger.warning(f"Fit hit the {max_iterations}-iteration cap; returning best-so-far")

    jac = numeric_jacobian(model_fn, x, p) * w[:, None]
    covariance = _covariance(jac, cost, y.size, absolute)
    rms = float(np.sqrt(np.mean((y - model_fn(x, p)) ** 2)))
    return FitResult(
        params={n: float(v) for n, v in zip(names, p)},
        covariance=covariance,
        residual_rms=rms,
        converged=converged,
        iterations=iterations,
    )


# -----------------------------------------------------------------------------
# Linear fits
# -----------------------------------------------------------------------------

def fit_polynomial(xs, ys, degree: int, through_origin: bool = False, sigma=None) -> FitResult:
    """
    Polynomial least squares via column-scaled normal equations

    Args:
        xs, ys: data
        degree: polynomial degree
        through_origin: drop the constant term
        sigma: optional per-point standard deviations

    Returns:
        FitResult with parameters c<k> for each power k
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise FitError("xs and ys must be 1-D arrays of equal length")
    if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
        raise FitError("non-finite values in polynomial data")
    powers = list(range(1 if through_origin else 0, degree + 1))
    if not powers:
        raise FitError("through-origin fit needs degree >= 1")
    if xs.size <= degree:
        raise FitError(f"insufficient points: {xs.size} points for degree {degree}")

    design = np.column_stack([xs**k for k in powers])
    scale = np.abs(design).max(axis=0)
    if np.any(scale == 0) or np.linalg.matrix_rank(design / np.where(scale == 0, 1, scale)) < len(powers):
        raise FitError("rank-deficient polynomial design matrix")
    scaled = design / scale

    w, absolute = _weights(sigma, ys.size)
    a = scaled * w[:, None]
    b = ys * w
    try:
        factor = linalg.cho_factor(a.T @ a)
    except linalg.LinAlgError as exc:
        raise FitError(f"rank-deficient normal equations: {exc}") from exc
    coeffs = linalg.cho_solve(factor, a.T @ b) / scale

    resid = ys - design @ coeffs
    cost = float(np.sum((resid * w) ** 2))
    inv = linalg.cho_solve(factor, np.eye(len(powers))) / np.outer(scale, scale)
    dof = ys.size - len(powers)
    covariance = inv if absolute else inv * (cost / dof if dof > 0 else 0.0)

    sst = float(np.sum((ys - ys.mean()) ** 2))
    ssr = float(np.sum(resid**2))
    r_squared = 1.0 - ssr / sst if sst > 0 else 1.0
    return FitResult(
        params={f"c{k}": float(c) for k, c in zip(powers, coeffs)},
        covariance=0.5 * (covariance + covariance.T),
        residual_rms=float(np.sqrt(np.mean(resid**2))),
        converged=True,
        iterations=1,
        extras={"r_squared": r_squared},
    )


def fit_line(xs, ys, through_origin: bool = False, sigma=None) -> FitResult:
    return fit_polynomial(xs, ys, 1, through_origin=through_origin, sigma=sigma)


# -----------------------------------------------------------------------------
# Fixed-frequency sinusoid (RF-correlation histograms)
# -----------------------------------------------------------------------------

def _spans_period(theta: np.ndarray) -> bool:
    ordered = np.sort(theta)
    spacing = np.median(np.diff(ordered))
    return (ordered[-1] - ordered[0]) + spacing >= 2.0 * np.pi * (1.0 - 1e-6)


def fit_fixed_frequency_sinusoid(
    bin_centers,
    counts,
    frequency_known: bool = True,
    reference_phase: float = 0.0,
    sigma=None,
) -> FitResult:
    """
    Fit counts = offset + A cos(theta - phase) on phase bins

    The amplitude is signed: positive when the fitted phase lies within
    pi/2 of reference_phase, negative otherwise.
    """
    theta = np.asarray(bin_centers, dtype=float)
    y = np.asarray(counts, dtype=float)
    if theta.size < 8:
        raise FitError(f"need at least 8 phase bins, got {theta.size}")
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(y))):
        raise FitError("non-finite values in phase histogram")
    if not _spans_period(theta):
        raise FitError("phase bins do not span a full period")

    design = np.column_stack([np.cos(theta), np.sin(theta), np.ones_like(theta)])
    w, absolute = _weights(sigma, y.size)
    coeffs, *_ = np.linalg.lstsq(design * w[:, None], y * w, rcond=None)
    resid = y - design @ coeffs
    cost = float(np.sum((resid * w) ** 2))
    inv = np.linalg.pinv((design * w[:, None]).T @ (design * w[:, None]))
    cov_lin = inv if absolute else inv * cost / max(y.size - 3, 1)
    a, b, c = coeffs
    iterations = 1
    converged = True
    frequency = None

    if not frequency_known:
        start_amp = np.hypot(a, b)
        start = [start_amp, np.arctan2(b, a), c, 1.0]
        free = gauss_newton_engine(
            lambda t, p: p[2] + p[0] * np.cos(p[3] * t - p[1]),
            start, theta, y, sigma=sigma,
            param_names=["amplitude", "phase", "offset", "frequency"],
        )
        amp, phase, c, frequency = (free.params[k] for k in ("amplitude", "phase", "offset", "frequency"))
        a, b = amp * np.cos(phase), amp * np.sin(phase)
        cov_lin = free.covariance
        iterations, converged = free.iterations, free.converged
        resid = y - (c + amp * np.cos(frequency * theta - phase))

    magnitude = float(np.hypot(a, b))
    phase = float(np.arctan2(b, a))
    sign = 1.0 if np.cos(phase - reference_phase) >= 0 else -1.0

    if frequency is None:
        if magnitude > 0:
            jac = np.array([
                [sign * a / magnitude, sign * b / magnitude, 0.0],
                [-b / magnitude**2, a / magnitude**2, 0.0],
                [0.0, 0.0, 1.0],
            ])
            covariance = jac @ cov_lin @ jac.T
        else:
            var = 0.5 * (cov_lin[0, 0] + cov_lin[1, 1])
            covariance = np.diag([var, np.inf, cov_lin[2, 2]])
        params = {"amplitude": sign * magnitude, "phase": phase, "offset": float(c)}
    else:
        jac = np.diag([sign, 1.0, 1.0, 1.0])
        covariance = jac @ cov_lin @ jac.T
        params = {"amplitude": sign * magnitude, "phase": phase, "offset": float(c), "frequency": float(frequency)}

    return FitResult(
        params=params,
        covariance=covariance,
        residual_rms=float(np.sqrt(np.mean(resid**2))),
        converged=converged,
        iterations=iterations,
        extras={"magnitude": magnitude, "reference_phase": float(reference_phase)},
    )


# -----------------------------------------------------------------------------
# Gaussian profiles
# -----------------------------------------------------------------------------

def gaussian_1d(x: np.ndarray, p: np.ndarray) -> np.ndarray:
    """A exp(-2 (x - x0)^2 / w^2) + B, waist in the e^-2 intensity convention"""
    amplitude, center, waist, offset = p
    return amplitude * np.exp(-2.0 * (x - center) ** 2 / waist**2) + offset


def fit_gaussian_1d(xs, ys, sigma=None) -> FitResult:
    """
    Fit a Gaussian beam profile; waist reported in the e^-2 convention

    Flat data cannot define a waist and comes back with converged=False.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.size < 5:
        raise FitError(f"need at least 5 points for a Gaussian fit, got {xs.size}")
    names = ["amplitude", "center", "waist", "offset"]

    offset0 = float(ys.min())
    weight = ys - offset0
    if not np.any(weight > 0):
        logger.warning("Gaussian fit on flat data; flagging as unconverged")
        return FitResult(
            params=dict(zip(names, [0.0, float(xs.mean()), 0.0, offset0])),
            covariance=np.full((4, 4), np.inf),
            residual_rms=0.0,
            converged=False,
            iterations=0,
        )
    center0 = float(np.sum(weight * xs) / weight.sum())
    var0 = float(np.sum(weight * (xs - center0) ** 2) / weight.sum())
    waist0 = max(2.0 * np.sqrt(var0), np.min(np.diff(np.sort(xs))))
    start = [float(weight.max()), center0, waist0, offset0]

    result = gauss_newton_engine(gaussian_1d, start, xs, ys, sigma=sigma, param_names=names)
    result.params["waist"] = abs(result.params["waist"])
    return result


def gaussian_2d(coords: np.ndarray, p: np.ndarray) -> np.ndarray:
    amplitude, x0, y0, sx, sy, offset = p
    x, y = coords
    return amplitude * np.exp(-0.5 * ((x - x0) / sx) ** 2 - 0.5 * ((y - y0) / sy) ** 2) + offset


def fit_gaussian_spot_2d(frame: np.ndarray, camera: Optional[CameraModel] = None, significance: float = 5.0) -> FitResult:
    """
    Fit an elliptical Gaussian spot to a camera frame

    Pixel (row i, column j) is centred at coordinate (y=i, x=j). With a
    camera model the centroid is also reported in object space, relative
    to the sensor centre, as extras x0_m / y0_m.
    """
    frame = np.asarray(frame, dtype=float)
    if frame.ndim != 2 or min(frame.shape) < 3:
        raise FitError("frame must be a 2-D pixel grid of at least 3x3")
    if not np.all(np.isfinite(frame)):
        raise FitError("non-finite pixel values")

    background = float(np.median(frame))
    mad = 1.4826 * float(np.median(np.abs(frame - background)))
    gain = camera.counts_per_photon if camera is not None else 1.0
    noise = max(mad, np.sqrt(max(background * gain, 0.0)), gain)
    peak = float(frame.max())
    if peak - background < significance * noise:
        raise FitError(
            f"no significant spot: peak {peak:.1f} is less than {significance:g} sigma above background {background:.1f}"
        )

    ny, nx = frame.shape
    yy, xx = np.indices(frame.shape, dtype=float)
    weight = np.clip(frame - background, 0.0, None)
    weight[frame - background < 3.0 * noise] = 0.0
    total = weight.sum()
    x0 = float(np.sum(weight * xx) / total)
    y0 = float(np.sum(weight * yy) / total)
    sx = max(np.sqrt(np.sum(weight * (xx - x0) ** 2) / total), 0.5)
    sy = max(np.sqrt(np.sum(weight * (yy - y0) ** 2) / total), 0.5)

    coords = np.vstack([xx.ravel(), yy.ravel()])
    result = gauss_newton_engine(
        gaussian_2d,
        [peak - background, x0, y0, sx, sy, background],
        coords,
        frame.ravel(),
        param_names=["amplitude", "x0", "y0", "sx", "sy", "offset"],
    )
    result.params["sx"] = abs(result.params["sx"])
    result.params["sy"] = abs(result.params["sy"])
    if camera is not None:
        cx, cy = camera.sensor_center
        result.extras["x0_m"] = (result.params["x0"] - cx) * camera.pixel_pitch_object
        result.extras["y0_m"] = (result.params["y0"] - cy) * camera.pixel_pitch_object
    return result


# -----------------------------------------------------------------------------
# Pseudo-Voigt
# -----------------------------------------------------------------------------

def tch_mixing(gaussian_sigma: float, lorentzian_hwhm: float) -> Tuple[float, float]:
    """Thompson-Cox-Hastings mixing: returns (eta, total FWHM)"""
    fg = _FWHM_PER_SIGMA * abs(gaussian_sigma)
    fl = 2.0 * abs(lorentzian_hwhm)
    f5 = (
        fg**5
        + 2.69269 * fg**4 * fl
        + 2.42843 * fg**3 * fl**2
        + 4.47163 * fg**2 * fl**3
        + 0.07842 * fg * fl**4
        + fl**5
    )
    fwhm = max(f5 ** 0.2, np.finfo(float).tiny)
    ratio = fl / fwhm
    eta = 1.36603 * ratio - 0.47719 * ratio**2 + 0.11116 * ratio**3
    return float(eta), float(fwhm)


def pseudo_voigt_profile(x, center: float, gaussian_sigma: float, lorentzian_hwhm: float) -> np.ndarray:
    """Unit-peak eta*Lorentzian + (1-eta)*Gaussian sharing one FWHM"""
    eta, fwhm = tch_mixing(gaussian_sigma, lorentzian_hwhm)
    u = np.asarray(x, dtype=float) - center
    sigma_f = fwhm / _FWHM_PER_SIGMA
    lorentz = 1.0 / (1.0 + (2.0 * u / fwhm) ** 2)
    gauss = np.exp(-0.5 * (u / sigma_f) ** 2)
    return eta * lorentz + (1.0 - eta) * gauss


def pseudo_voigt_area(amplitude: float, gaussian_sigma: float, lorentzian_hwhm: float) -> float:
    """Analytic integral of amplitude * pseudo_voigt_profile"""
    eta, fwhm = tch_mixing(gaussian_sigma, lorentzian_hwhm)
    sigma_f = fwhm / _FWHM_PER_SIGMA
    return float(amplitude * (eta * np.pi * fwhm / 2.0 + (1.0 - eta) * sigma_f * np.sqrt(2.0 * np.pi)))


def _pseudo_voigt_model(x: np.ndarray, p: np.ndarray) -> np.ndarray:
    center, sigma, gamma, amplitude, offset = p
    return offset + amplitude * pseudo_voigt_profile(x, center, sigma, gamma)


def fit_pseudo_voigt(detunings, counts, sigma=None) -> FitResult:
    """
    Fit a pseudo-Voigt line and integrate it

    The spectral area covers the line components only; the offset is
    excluded. Its uncertainty is propagated from the parameter covariance.
    """
    x = np.asarray(detunings, dtype=float)
    y = np.asarray(counts, dtype=float)
    if x.size < 9:
        raise FitError(f"need at least 9 points across the line, got {x.size}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise FitError("non-finite values in spectrum")

    offset0 = float(y.min())
    amplitude0 = float(y.max() - offset0)
    center0 = float(x[np.argmax(y)])
    above = x[y - offset0 > 0.5 * amplitude0]
    spacing = float(np.min(np.diff(np.sort(x))))
    fwhm0 = max(float(above.max() - above.min()) if above.size else spacing, spacing)
    start = [center0, 0.5 * fwhm0 / _FWHM_PER_SIGMA, 0.25 * fwhm0, amplitude0, offset0]

    result = gauss_newton_engine(
        _pseudo_voigt_model, start, x, y, sigma=sigma,
        param_names=["center", "gaussian_width", "lorentzian_width", "amplitude", "offset"],
    )
    p = result.values
    result.params["gaussian_width"] = abs(result.params["gaussian_width"])
    result.params["lorentzian_width"] = abs(result.params["lorentzian_width"])

    def area_of(q: np.ndarray) -> float:
        return pseudo_voigt_area(q[3], q[1], q[2])

    grad = np.array([
        (area_of(p + dp) - area_of(p - dp)) / (2.0 * dp[k])
        for k, dp in enumerate(np.diag(_SQRT_EPS * np.maximum(np.abs(p), 1.0)))
    ])
    area_var = float(grad @ result.covariance @ grad)
    eta, fwhm = tch_mixing(p[1], p[2])
    result.extras.update({
        "spectral_area": area_of(p),
        "spectral_area_error": float(np.sqrt(max(area_var, 0.0))),
        "eta": eta,
        "fwhm": fwhm,
    })
    return result


# -----------------------------------------------------------------------------
# Standing-wave trace
# -----------------------------------------------------------------------------

def standing_wave(x: np.ndarray, p: np.ndarray, background: float = 0.0) -> np.ndarray:
    scale, visibility, origin, period = p
    return background + scale * (1.0 + visibility * np.cos(2.0 * np.pi * (x - origin) / period))


def fit_standing_wave(positions, counts, background: float, period_guess: float, sigma=None) -> FitResult:
    """
    Fit background + C (1 + v cos(2 pi (x - x0) / P)) with the background held fixed

    Visibility v is therefore that of the background-subtracted trace.
    """
    x = np.asarray(positions, dtype=float)
    y = np.asarray(counts, dtype=float)
    if x.size < 6:
        raise FitError(f"need at least 6 points for a standing-wave fit, got {x.size}")
    signal = y - background
    scale0 = float(max(signal.mean(), np.finfo(float).tiny))
    vis0 = float(np.clip((signal.max() - signal.min()) / (signal.max() + signal.min() + 1e-300), 0.05, 1.0))
    origin0 = float(x[np.argmax(y)])

    result = gauss_newton_engine(
        lambda xx, p: standing_wave(xx, p, background),
        [scale0, vis0, origin0, period_guess],
        x, y, sigma=sigma,
        param_names=["scale", "visibility", "origin", "period"],
    )
    if result.params["visibility"] < 0:
        result.params["visibility"] *= -1.0
        result.params["origin"] += 0.5 * result.params["period"]
    result.params["period"] = abs(result.params["period"])
    result.extras["background"] = float(background)
    return result
