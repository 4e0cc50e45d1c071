"""
Servo Service - cavity-length lock: plant, compensation filter, margins and closed-loop simulation
"""
import logging
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import optimize, signal

from models.errors import ConfigurationError, LoopAnalysisError, UnstableConfigurationError
from models.servo import FilterSection, LockResult, LoopFilter, LoopMargins, NoiseModel, PlantModel
from models.tables import ScanTable

logger = logging.getLogger(__name__)

StateSpace = Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]

DEFAULT_SAMPLE_RATE = 1e6
MIN_OVERSAMPLING = 100
SUPPRESSION_BAND_HZ = 100.0
LINEAR_RANGE = 0.5  # linewidths either side of resonance


# =============================================================================
# Plant
# =============================================================================

def _plant_sections(plant: PlantModel):
    """Continuous (num, den) factors with unity DC gain"""
    for res in plant.resonances:
        wp = 2.0 * np.pi * res.frequency_hz
        wz = 2.0 * np.pi * res.zero_frequency_hz
        num = np.array([1.0, wz / res.q, wz**2]) * (wp**2 / wz**2)
        yield num, np.array([1.0, wp / res.q, wp**2])
    if plant.rolloff_hz is not None:
        wc = 2.0 * np.pi * plant.rolloff_hz
        yield np.array([wc**2]), np.array([1.0, np.sqrt(2.0) * wc, wc**2])


def plant_frequency_response(plant: PlantModel, f) -> np.ndarray:
    """Piezo response (nm/V) at frequencies f (Hz)"""
    f = np.atleast_1d(np.asarray(f, dtype=float))
    if np.any(f <= 0):
        raise ConfigurationError("frequencies must be positive", ["f"])
    response = np.full(f.shape, plant.dc_gain, dtype=complex)
    for num, den in _plant_sections(plant):
        _, h = signal.freqs(num, den, worN=2.0 * np.pi * f)
        response *= h
    return response


# =============================================================================
# Loop filter
# =============================================================================

def _discretize_section(section: FilterSection, sample_rate: float) -> Tuple[np.ndarray, np.ndarray]:
    """Bilinear transform with the corner prewarped"""
    if section.frequency_hz >= sample_rate / 8.0:
        raise ConfigurationError(
            f"section corner {section.frequency_hz} Hz is not below Nyquist/4 ({sample_rate / 8.0:.0f} Hz)",
            ["sections"],
        )
    w0 = 2.0 * sample_rate * np.tan(np.pi * section.frequency_hz / sample_rate)
    num = [section.gain_high, section.gain_band * w0 / section.q, section.gain_low * w0**2]
    den = [1.0, w0 / section.q, w0**2]
    b, a = signal.bilinear(num, den, fs=sample_rate)
    if np.any(np.abs(np.roots(a)) >= 1.0):
        raise UnstableConfigurationError(
            f"filter section at {section.frequency_hz} Hz (Q={section.q}) has poles outside the unit circle"
        )
    return b, a


def compose_loop_filter(
    sections: Sequence[FilterSection],
    sample_rate: float = DEFAULT_SAMPLE_RATE,
    pi_gains: Optional[Tuple[float, float]] = None,
    gain: float = 1.0,
    delay_samples: int = 1,
) -> LoopFilter:
    """
    Build the discrete compensation filter

    Args:
        sections: continuous biquad prototypes (low-pass, band-pass/stop, high-pass)
        sample_rate: Hz
        pi_gains: (kp, ki) of the PI stage, None for no PI
        gain: overall scalar
        delay_samples: ADC/DAC latency

    Raises:
        ConfigurationError: corner at or above Nyquist/4
        UnstableConfigurationError: a section has unstable poles
    """
    discrete = tuple(_discretize_section(s, sample_rate) for s in sections)
    logger.debug(f"Composed loop filter with {len(discrete)} sections at {sample_rate:.0f} Hz")
    return LoopFilter(
        sections=discrete,
        sample_rate=sample_rate,
        pi_gains=pi_gains,
        gain=gain,
        delay_samples=delay_samples,
        prototypes=tuple(sections),
    )


def _pi_coefficients(filt: LoopFilter) -> Tuple[np.ndarray, np.ndarray]:
    kp, ki = filt.pi_gains
    half = 0.5 * ki * filt.dt
    return np.array([kp + half, -kp + half]), np.array([1.0, -1.0])


def filter_response(filt: LoopFilter, f) -> np.ndarray:
    """Composite discrete response at f (Hz), delay included"""
    f = np.atleast_1d(np.asarray(f, dtype=float))
    response = np.full(f.shape, filt.gain, dtype=complex)
    stages = list(filt.sections)
    if filt.pi_gains is not None:
        stages.append(_pi_coefficients(filt))
    for b, a in stages:
        _, h = signal.freqz(b, a, worN=f, fs=filt.sample_rate)
        response *= h
    return response * np.exp(-2j * np.pi * f * filt.dt * filt.delay_samples)


def open_loop_response(plant: PlantModel, filt: LoopFilter, f) -> np.ndarray:
    """Discriminant x plant x zero-order hold x filter"""
    f = np.atleast_1d(np.asarray(f, dtype=float))
    hold = np.exp(-1j * np.pi * f * filt.dt)
    return plant.discriminant * plant_frequency_response(plant, f) * hold * filter_response(filt, f)


def _check_oversampling(plant: PlantModel, filt: LoopFilter):
    if filt.sample_rate < MIN_OVERSAMPLING * plant.highest_resonance_hz:
        raise ConfigurationError(
            f"sample rate {filt.sample_rate:.0f} Hz is below {MIN_OVERSAMPLING}x the highest resonance",
            ["sample_rate_hz"],
        )


def loop_margins(
    plant: PlantModel,
    filt: LoopFilter,
    f_min: float = 1.0,
    f_max: Optional[float] = None,
    points: int = 4000,
) -> LoopMargins:
    """
    Gain and phase margin of the composed open loop

    Phase margin is taken at the last unity-gain crossing; gain margin is the
    smallest over all -180 deg crossings (infinite if there is none).

    Raises:
        LoopAnalysisError: no unity-gain crossing on the grid
    """
    _check_oversampling(plant, filt)
    f_max = f_max or 0.45 * filt.sample_rate
    freqs = np.geomspace(f_min, f_max, points)
    response = open_loop_response(plant, filt, freqs)
    log_mag = np.log(np.abs(response))
    phase = np.unwrap(np.angle(response))

    def log_gain(log_f: float) -> float:
        return float(np.log(np.abs(open_loop_response(plant, filt, np.exp(log_f))[0])))

    unity = np.flatnonzero(np.sign(log_mag[:-1]) != np.sign(log_mag[1:]))
    if unity.size == 0:
        raise LoopAnalysisError("open loop has no unity-gain crossing in the analysed band")
    k = unity[-1]
    f_unity = float(np.exp(optimize.brentq(log_gain, np.log(freqs[k]), np.log(freqs[k + 1]), xtol=1e-12)))
    at_unity = open_loop_response(plant, filt, f_unity)[0]
    phase_unity = phase[k] + np.angle(at_unity / response[k])
    phase_margin = (np.degrees(phase_unity) + 180.0 + 180.0) % 360.0 - 180.0

    def imag_part(f: float) -> float:
        return float(open_loop_response(plant, filt, f)[0].imag)

    turns = np.floor((phase + np.pi) / (2.0 * np.pi))
    crossings = np.flatnonzero(turns[:-1] != turns[1:])
    gain_margin, f_phase = np.inf, None
    for idx in crossings:
        try:
            f_cross = optimize.brentq(imag_part, freqs[idx], freqs[idx + 1], xtol=1e-9)
        except ValueError:
            f_cross = freqs[idx]
        margin = -20.0 * np.log10(np.abs(open_loop_response(plant, filt, f_cross)[0]))
        if margin < gain_margin:
            gain_margin, f_phase = float(margin), float(f_cross)

    logger.info(
        f"Loop margins: PM={phase_margin:.1f} deg at {f_unity:.0f} Hz, GM={gain_margin:.1f} dB"
    )
    return LoopMargins(
        gain_margin_db=gain_margin,
        phase_margin_deg=float(phase_margin),
        unity_gain_hz=f_unity,
        phase_crossover_hz=f_phase,
    )


def bode_table(plant: PlantModel, filt: LoopFilter, freqs) -> ScanTable:
    freqs = np.asarray(freqs, dtype=float)
    response = open_loop_response(plant, filt, freqs)
    return ScanTable(
        independent={"f_Hz": freqs},
        dependent={
            "mag_dB": 20.0 * np.log10(np.abs(response)),
            "phase_deg": np.degrees(np.unwrap(np.angle(response))),
        },
    )


# =============================================================================
# Time-domain loop
# =============================================================================

def _series(first: StateSpace, second: StateSpace) -> StateSpace:
    """Output of `first` drives `second`"""
    a1, b1, c1, d1 = first
    a2, b2, c2, d2 = second
    n1, n2 = a1.shape[0], a2.shape[0]
    a = np.block([[a1, np.zeros((n1, n2))], [b2 @ c1, a2]])
    b = np.vstack([b1, b2 @ d1])
    c = np.hstack([d2 @ c1, c2])
    return a, b, c, d2 @ d1


def _static_gain(k: float) -> StateSpace:
    return np.zeros((0, 0)), np.zeros((0, 1)), np.zeros((1, 0)), np.array([[k]])


def _chain(factors) -> StateSpace:
    system = _static_gain(1.0)
    for num, den in factors:
        system = _series(system, tuple(np.atleast_2d(m) for m in signal.tf2ss(num, den)))
    return system


def discrete_plant(plant: PlantModel, dt: float) -> StateSpace:
    """Zero-order-hold discretization of the whole continuous plant"""
    a, b, c, d = _series(_static_gain(plant.dc_gain), _chain(_plant_sections(plant)))
    ad, bd, cd, dd, _ = signal.cont2discrete((a, b, c, d), dt, method="zoh")
    return ad, bd, cd, dd


def discrete_controller(filt: LoopFilter) -> StateSpace:
    factors = list(filt.sections)
    if filt.pi_gains is not None:
        factors.append(_pi_coefficients(filt))
    factors.extend([(np.array([0.0, 1.0]), np.array([1.0, 0.0]))] * filt.delay_samples)
    return _series(_static_gain(filt.gain), _chain(factors))


def closed_loop_system(plant: PlantModel, filt: LoopFilter) -> StateSpace:
    """
    Lock loop with inputs (vibration nm, sensor noise linewidths) and output
    the true length residual in linewidths
    """
    if filt.delay_samples < 1:
        raise ConfigurationError("time-domain loop needs at least one sample of delay", ["delay_samples"])
    ap, bp, cp, dp = discrete_plant(plant, filt.dt)
    ak, bk, ck, dk = discrete_controller(filt)
    disc = plant.discriminant
    a = np.block([
        [ap, -bp @ ck],
        [disc * bk @ cp, ak - disc * bk @ dp @ ck],
    ])
    b = np.block([
        [np.zeros((ap.shape[0], 2))],
        [disc * bk, bk],
    ])
    c = disc * np.hstack([cp, -dp @ ck])
    d = np.array([[disc, 0.0]])
    radius = np.abs(np.linalg.eigvals(a)).max()
    if radius >= 1.0:
        raise UnstableConfigurationError(f"closed loop is unstable (spectral radius {radius:.6f})")
    return a, b, c, d


def _simulate(system: StateSpace, inputs: np.ndarray, dt: float, block_size: int) -> np.ndarray:
    a, b, c, d = system
    state = np.zeros(a.shape[0])
    outputs = np.empty(inputs.shape[0])
    for start in range(0, inputs.shape[0], block_size):
        block = inputs[start:start + block_size]
        _, y, x = signal.dlsim((a, b, c, d, dt), block, x0=state)
        outputs[start:start + block.shape[0]] = np.ravel(y)
        state = a @ x[-1] + b @ block[-1]
    if not np.all(np.isfinite(outputs)):
        raise UnstableConfigurationError("closed-loop simulation diverged")
    return outputs


def vibration_noise(noise: NoiseModel, n: int, dt: float, rng: np.random.Generator) -> np.ndarray:
    """Stationary Ornstein-Uhlenbeck trace (linewidths)"""
    pole = np.exp(-2.0 * np.pi * noise.vibration_corner_hz * dt)
    drive = noise.vibration_rms * np.sqrt(1.0 - pole**2)
    start = noise.vibration_rms * rng.standard_normal()
    trace, _ = signal.lfilter([drive], [1.0, -pole], rng.standard_normal(n), zi=[pole * start])
    return trace


def _band_power(trace: np.ndarray, fs: float, band_hz: float) -> float:
    freqs, psd = signal.welch(trace, fs=fs, nperseg=min(2**16, trace.size))
    mask = (freqs > 0) & (freqs <= band_hz)
    return float(psd[mask].sum())


def simulate_lock(
    plant: PlantModel,
    filt: LoopFilter,
    noise: NoiseModel,
    duration: float,
    seed,
    block_size: int = 65536,
    settle_time: float = 5e-3,
) -> LockResult:
    """
    Discrete-time closed-loop lock under vibration and sensor noise

    The discriminant is modelled in its small-signal limit: the error signal
    stays linear at every detuning, so the loop never drops lock. Samples
    beyond +-1/2 linewidth are counted in `capture_fraction` (and logged) as
    the share of the run a real PDH slope would no longer follow.

    Args:
        plant: piezo plant and discriminant
        filt: loop filter
        noise: noise model (linewidths)
        duration: seconds
        seed: RNG seed
        block_size: samples per simulation block; results do not depend on it
        settle_time: initial span excluded from statistics (s)

    Returns:
        LockResult with the residual and the unlocked trace under the same noise

    Raises:
        UnstableConfigurationError: closed loop unstable or diverging
    """
    _check_oversampling(plant, filt)
    system = closed_loop_system(plant, filt)
    dt = filt.dt
    n = int(round(duration * filt.sample_rate))
    rng = np.random.default_rng(seed)
    vibration = vibration_noise(noise, n, dt, rng)
    sensor = noise.sensor_rms * rng.standard_normal(n)

    inputs = np.column_stack([vibration * plant.linewidth_nm, sensor])
    residual = _simulate(system, inputs, dt, block_size)

    settle = min(int(round(settle_time / dt)), n // 2)
    locked = residual[settle:]
    unlocked = vibration[settle:]
    closed_power = _band_power(locked, filt.sample_rate, SUPPRESSION_BAND_HZ)
    open_power = _band_power(unlocked, filt.sample_rate, SUPPRESSION_BAND_HZ)
    suppression = 10.0 * np.log10(open_power / closed_power) if closed_power > 0 and open_power > 0 else np.nan
    capture = float(np.mean(np.abs(locked) > LINEAR_RANGE)) if locked.size else 0.0
    if capture > 0:
        logger.warning(f"⚠️ {capture:.2%} of samples left the linear discriminant range")

    result = LockResult(
        dt=dt,
        residual=residual,
        open_loop=vibration,
        residual_std=float(np.std(locked)),
        open_loop_std=float(np.std(unlocked)),
        suppression_db=float(suppression),
        capture_fraction=capture,
        settle_samples=settle,
    )
    logger.info(
        f"Lock residual {result.residual_std:.4f} linewidths "
        f"(1/{1.0 / max(result.residual_std, 1e-300):.1f}), suppression {suppression:.1f} dB below 100 Hz"
    )
    return result


def measure_sensitivity(
    plant: PlantModel,
    filt: LoopFilter,
    freqs: Sequence[float],
    amplitude: float = 0.1,
    settle_time: float = 0.03,
    measure_time: float = 0.01,
) -> ScanTable:
    """
    Sensitivity |S| and phase from sinusoid injection, next to the analytic 1/(1 + L)

    amplitude is the injected length disturbance in linewidths.
    """
    system = closed_loop_system(plant, filt)
    fs = filt.sample_rate
    measured = []
    for f in freqs:
        cycles = max(1, int(round(measure_time * f)))
        n_measure = int(round(cycles * fs / f))
        n_total = int(round(settle_time * fs)) + n_measure
        t = np.arange(n_total) / fs
        drive = amplitude * np.sin(2.0 * np.pi * f * t)
        inputs = np.column_stack([drive * plant.linewidth_nm, np.zeros(n_total)])
        output = _simulate(system, inputs, 1.0 / fs, n_total)
        tone = np.exp(-2j * np.pi * f * t[-n_measure:])
        gain = np.sum(output[-n_measure:] * tone) / np.sum(drive[-n_measure:] * tone)
        measured.append(gain)

    measured = np.array(measured)
    analytic = 1.0 / (1.0 + open_loop_response(plant, filt, freqs))
    return ScanTable(
        independent={"f_Hz": np.asarray(freqs, dtype=float)},
        dependent={
            "measured_mag": np.abs(measured),
            "measured_phase_deg": np.degrees(np.angle(measured)),
            "analytic_mag": np.abs(analytic),
            "analytic_phase_deg": np.degrees(np.angle(analytic)),
        },
    )
