"""Carrier estimation and amplitude demodulation.

Two demodulators are provided.  ``synchronous`` (the default) uses the
estimated carrier as a reference and solves for the envelope as a piecewise
linear function with knots at ``env_rate``; it recovers modulation above the
power frequency (e.g. 108.8 Hz on a 50 Hz carrier), which no low-pass after a
square-law detector can.  ``square_law`` squares the waveform, low-passes it
below the double-frequency ripple and takes the square root; it is limited to
modulation below ``0.8 * f_c``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, signal as sps

from .errors import InvalidRate, NoCarrierFound, SignalTooShort
from .signals import SampledSignal

ENV_RATE = 1250.0
SEARCH_HZ = 5.0
MAX_OFFSET_HZ = 2.0
# carrier peak must stand this far above the local spectral median
PEAK_TO_MEDIAN = 100.0


@dataclass(frozen=True)
class CarrierEstimate:
    frequency: float
    phase: float
    amplitude: float  # peak volts

    def __post_init__(self):
        if not self.amplitude > 0:
            raise ValueError("carrier amplitude must be positive")


@dataclass(frozen=True, eq=False)
class Envelope(SampledSignal):
    """RMS-equivalent amplitude of the carrier, trimmed of edge transients."""

    cutoff: float = float("nan")
    trim: int = 0
    method: str = "synchronous"


def _fit_sinusoid(t, x, freq):
    w = 2 * np.pi * freq * t
    c, s = np.cos(w), np.sin(w)
    a = np.array([[c @ c, c @ s], [c @ s, s @ s]])
    ic, isn = np.linalg.solve(a, [c @ x, s @ x])
    return ic, isn


def estimate_carrier(signal: SampledSignal, nominal_fc: float = 50.0) -> CarrierEstimate:
    """Frequency, phase and peak amplitude of the power-frequency carrier.

    The coarse frequency is the largest Hann-windowed spectral line within
    +/-5 Hz of ``nominal_fc``, refined by a parabola through the log
    magnitudes of the three bins around it and then by Gauss-Newton steps on
    the least-squares sinusoid fit.
    """
    x = signal.samples
    fs = signal.sample_rate
    if x.size < 10 * fs / nominal_fc:
        raise SignalTooShort("need at least 10 carrier periods")
    n = x.size
    win = np.hanning(n)
    mag = np.abs(np.fft.rfft((x - x.mean()) * win))
    df = fs / n
    lo = max(1, int(math.floor((nominal_fc - SEARCH_HZ) / df)))
    hi = min(mag.size - 2, int(math.ceil((nominal_fc + SEARCH_HZ) / df)))
    band = mag[lo:hi + 1]
    k = lo + int(np.argmax(band))
    floor = float(np.median(band))
    if not mag[k] > PEAK_TO_MEDIAN * floor or mag[k] <= 0 or k in (lo, hi):
        raise NoCarrierFound(f"no carrier line within {SEARCH_HZ} Hz of {nominal_fc} Hz")
    la, lb, lc = np.log(mag[k - 1:k + 2] + 1e-300)
    denom = la - 2 * lb + lc
    delta = 0.5 * (la - lc) / denom if denom != 0 else 0.0
    freq = (k + delta) * df

    t = np.arange(n) / fs
    tc = t - t[-1] / 2  # centred time decorrelates frequency from phase
    for _ in range(5):
        w = 2 * np.pi * freq * tc
        c, s = np.cos(w), np.sin(w)
        ic, isn = _fit_sinusoid(tc, x, freq)
        resid = x - ic * c - isn * s
        jac = np.column_stack([c, s, 2 * np.pi * tc * (-ic * s + isn * c)])
        step = np.linalg.lstsq(jac, resid, rcond=None)[0][2]
        freq += step
        if abs(step) < 1e-10:
            break
    ic, isn = _fit_sinusoid(t, x, freq)
    # x ~ A cos(w t + phi) = A cos(phi) cos(w t) - A sin(phi) sin(w t)
    return CarrierEstimate(frequency=float(freq), phase=float(np.arctan2(-isn, ic)),
                           amplitude=float(np.hypot(ic, isn)))


def _trim_samples(cutoff, env_rate):
    return int(math.ceil(2.0 / cutoff * env_rate))


def _synchronous(x, fs, carrier, env_rate):
    n = x.size
    t = np.arange(n) / fs
    ref = np.sqrt(2.0) * np.cos(2 * np.pi * carrier.frequency * t + carrier.phase)
    pos = t * env_rate
    j = np.floor(pos).astype(np.int64)
    w = pos - j
    m = int(j[-1]) + 2
    c2 = ref * ref
    lo, hi = (1 - w), w
    diag = (np.bincount(j, c2 * lo * lo, minlength=m)
            + np.bincount(j + 1, c2 * hi * hi, minlength=m))
    off = np.bincount(j, c2 * lo * hi, minlength=m)[:m - 1]
    rhs = (np.bincount(j, ref * x * lo, minlength=m)
           + np.bincount(j + 1, ref * x * hi, minlength=m))
    if diag[-1] == 0:  # last knot unsupported when n/env_rate is integral
        diag, off, rhs, m = diag[:-1], off[:-1], rhs[:-1], m - 1
    ab = np.zeros((3, m))
    ab[0, 1:] = off
    ab[1] = diag
    ab[2, :-1] = off
    return linalg.solve_banded((1, 1), ab, rhs)


def _square_law(x, fs, cutoff, env_rate):
    sos = sps.butter(6, cutoff, fs=fs, output="sos")
    power = sps.sosfiltfilt(sos, x * x)
    rms = np.sqrt(np.clip(power, 0.0, None))
    t_env = np.arange(int(np.floor((x.size - 1) / fs * env_rate)) + 1) / env_rate
    return np.interp(t_env, np.arange(x.size) / fs, rms)


def demodulate(signal: SampledSignal, carrier: CarrierEstimate, env_rate: float = ENV_RATE,
               method: str = "synchronous") -> Envelope:
    """Recover the RMS envelope of ``signal`` sampled at ``env_rate``.

    ``trim = ceil(2 / cutoff * env_rate)`` envelope samples are dropped at
    each end; the same settings give the same trim at every meter, so windows
    stay aligned.  The synchronous method's effective cutoff is
    ``env_rate / 2``.
    """
    fs = signal.sample_rate
    if not 0 < env_rate < fs / 2:
        raise InvalidRate(f"env_rate must lie in (0, {fs / 2}) Hz")
    x = signal.samples
    if method == "synchronous":
        cutoff = env_rate / 2
        env = _synchronous(x, fs, carrier, env_rate)
    elif method == "square_law":
        cutoff = min(env_rate / 2, 0.8 * carrier.frequency)
        env = _square_law(x, fs, cutoff, env_rate)
    else:
        raise ValueError(f"unknown demodulation method {method!r}")
    trim = _trim_samples(cutoff, env_rate)
    if env.size <= 2 * trim:
        raise SignalTooShort("signal shorter than the edge-transient trim")
    env = np.clip(env[trim:env.size - trim], 0.0, None)
    meta = dict(signal.meta)
    meta.update(carrier_hz=carrier.frequency)
    return Envelope(env, env_rate, unit="volt", start_time=signal.start_time + trim / env_rate,
                    meta=meta, cutoff=cutoff, trim=trim, method=method)


def envelope_of(signal: SampledSignal, nominal_fc: float = 50.0, env_rate: float = ENV_RATE,
                method: str = "synchronous") -> Envelope:
    """Convenience: carrier estimation followed by demodulation."""
    return demodulate(signal, estimate_carrier(signal, nominal_fc), env_rate, method)
