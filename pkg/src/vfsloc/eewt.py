"""Empirical wavelet decomposition of envelopes and step regularization.

The spectrum of an envelope is segmented into ``N`` bands, a Meyer-type
filter bank is built on the band edges, and each band is extracted by
frequency-domain filtering with the squared filter response.  The squared
responses sum to one at every frequency, so the components add back up to the
envelope exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.signal import find_peaks

from .errors import EmptySignal, InvalidSegmentation, NotEnoughPeaks, SignalTooShort
from .signals import SampledSignal

GAMMA_CAP = 0.45
# transition half-width may use at most this share of the boundary-to-peak gap
PEAK_CLEARANCE = 0.5
THETA_REL = 0.05
SMOOTH_SECONDS = 0.02
LEAKAGE_THRESHOLD = 0.2


@dataclass(frozen=True, eq=False)
class Spectrum:
    frequencies: np.ndarray
    magnitudes: np.ndarray  # peak-amplitude scaled, volts
    n_samples: int
    sample_rate: float

    @property
    def resolution(self) -> float:
        return self.sample_rate / self.n_samples

    @property
    def nyquist(self) -> float:
        return self.sample_rate / 2

    def __len__(self):
        return self.magnitudes.size


@dataclass(frozen=True)
class SpectrumSegmentation:
    boundaries: tuple[float, ...]
    n_bands: int
    nyquist: float
    peaks: tuple[float, ...] = ()  # retained maxima, used to keep transitions off them

    def __post_init__(self):
        b = tuple(float(x) for x in self.boundaries)
        object.__setattr__(self, "boundaries", b)
        object.__setattr__(self, "peaks", tuple(float(x) for x in self.peaks))
        if self.n_bands < 1 or len(b) != self.n_bands - 1:
            raise InvalidSegmentation(f"{self.n_bands} bands need {self.n_bands - 1} boundaries")
        edges = (0.0,) + b + (self.nyquist,)
        if any(hi <= lo for lo, hi in zip(edges, edges[1:])):
            raise InvalidSegmentation("boundaries must increase strictly inside (0, Nyquist)")

    @property
    def edges(self) -> tuple[float, ...]:
        return (0.0,) + self.boundaries + (self.nyquist,)

    def band(self, k: int) -> tuple[float, float]:
        e = self.edges
        return e[k], e[k + 1]

    @classmethod
    def from_boundaries(cls, boundaries: Sequence[float], nyquist: float) -> "SpectrumSegmentation":
        b = tuple(sorted(boundaries))
        return cls(b, len(b) + 1, nyquist)


@dataclass(frozen=True, eq=False)
class Component(SampledSignal):
    band_index: int = 0
    band: tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True, eq=False)
class RegularizedComponent:
    step_signal: SampledSignal
    change_times: np.ndarray
    changes: np.ndarray  # signed k^(j), volts
    plateau_levels: np.ndarray
    threshold: float
    band_index: int = 0
    theta_abs: float = 0.0

    @property
    def n_changes(self) -> int:
        return int(self.changes.size)


def magnitude_spectrum(envelope: SampledSignal) -> Spectrum:
    """Hann-windowed DFT magnitude of the mean-removed signal.

    Scaled so that a sinusoid of amplitude ``a`` on a bin shows a peak ``a``.
    """
    x = np.asarray(envelope.samples, dtype=float)
    if x.size == 0:
        raise EmptySignal("empty signal")
    win = np.hanning(x.size) if x.size > 1 else np.ones(1)
    xw = (x - x.mean()) * win
    mag = 2.0 * np.abs(np.fft.rfft(xw)) / max(win.sum(), 1e-300)
    mag[0] = 0.0
    freqs = np.fft.rfftfreq(x.size, 1.0 / envelope.sample_rate)
    return Spectrum(freqs, mag, x.size, envelope.sample_rate)


def default_width(n_bins: int) -> int:
    return 3


def segment_spectrum(spectrum: Spectrum, n: int, width: int | None = None) -> SpectrumSegmentation:
    """Adaptive band boundaries for an ``n``-band filter bank.

    The magnitude spectrum is upper-enveloped by a moving maximum of ``width``
    bins; the ``n`` largest local maxima of that envelope are retained and a
    boundary is placed at the lowest raw-spectrum bin between each pair of
    neighbouring retained maxima.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    mag = spectrum.magnitudes
    if mag.size < 2 * n:
        raise NotEnoughPeaks(0, n)
    if n == 1:
        return SpectrumSegmentation((), 1, spectrum.nyquist)
    w = default_width(mag.size) if width is None else max(1, int(width))
    env = ndimage.maximum_filter1d(mag, size=w, mode="nearest")
    idx, _ = find_peaks(np.concatenate(([0.0], env[1:], [0.0])))
    idx = idx[(idx >= 1) & (idx < mag.size - 1)]
    idx = idx[env[idx] > 0]
    if idx.size < n:
        raise NotEnoughPeaks(int(idx.size), n)
    # largest first; equal heights resolve towards low frequency
    order = np.lexsort((idx, -env[idx]))
    keep = np.sort(idx[order[:n]])
    bounds = []
    for a, b in zip(keep, keep[1:]):
        seg = mag[a + 1:b]
        if seg.size == 0:
            raise NotEnoughPeaks(int(idx.size), n)
        low = np.flatnonzero(seg <= seg.min() * (1 + 1e-9) + 1e-300)
        bounds.append(spectrum.frequencies[a + 1 + low[low.size // 2]])
    return SpectrumSegmentation(tuple(bounds), n, spectrum.nyquist,
                                peaks=tuple(spectrum.frequencies[keep]))


def _beta(x):
    x = np.clip(x, 0.0, 1.0)
    return x ** 4 * (35 - 84 * x + 70 * x ** 2 - 20 * x ** 3)


def transition_halfwidths(seg: SpectrumSegmentation, gamma_cap: float = GAMMA_CAP) -> np.ndarray:
    """Half-width (Hz) of the Meyer transition at each boundary.

    ``gamma_k = min(cap, r(k-1, k), r(k, k+1))`` with
    ``r(a, b) = (w_b - w_a) / (w_b + w_a)`` over the edges including 0 and
    Nyquist; neighbouring transitions therefore never overlap.  When the
    segmentation carries its retained peaks, the transition is further kept
    clear of them.
    """
    e = np.asarray(seg.edges)
    b = e[1:-1]
    if b.size == 0:
        return np.zeros(0)
    ratio = (e[1:] - e[:-1]) / (e[1:] + e[:-1])
    gamma = np.minimum(gamma_cap, np.minimum(ratio[:-1], ratio[1:]))
    half = gamma * b
    if seg.peaks:
        p = np.asarray(seg.peaks)
        for k, wk in enumerate(b):
            gap = np.min(np.abs(p - wk))
            half[k] = min(half[k], PEAK_CLEARANCE * gap)
    return half


def filter_bank(freqs: np.ndarray, seg: SpectrumSegmentation,
                gamma_cap: float = GAMMA_CAP) -> np.ndarray:
    """Meyer scaling + wavelet responses, shape ``(n_bands, freqs.size)``.

    The squared responses sum to one at every frequency.
    """
    f = np.abs(np.asarray(freqs, dtype=float))
    b = np.asarray(seg.boundaries)
    half = transition_halfwidths(seg, gamma_cap)
    bank = np.ones((seg.n_bands, f.size))
    for k, (wk, tk) in enumerate(zip(b, half)):
        if tk > 0:
            arg = _beta((f - (wk - tk)) / (2 * tk))
        else:
            arg = (f >= wk).astype(float)
        below = np.cos(0.5 * np.pi * arg)
        above = np.sin(0.5 * np.pi * arg)
        bank[:k + 1] *= below
        bank[k + 1:] *= above
    return bank


def decompose(envelope: SampledSignal, seg: SpectrumSegmentation,
              gamma_cap: float = GAMMA_CAP) -> list[Component]:
    x = np.asarray(envelope.samples, dtype=float)
    nyq = envelope.sample_rate / 2
    if not math.isclose(seg.nyquist, nyq, rel_tol=1e-9):
        raise InvalidSegmentation(f"segmentation built for Nyquist {seg.nyquist}, signal has {nyq}")
    if seg.n_bands == 1:
        return [Component(x.copy(), envelope.sample_rate, unit=envelope.unit,
                          start_time=envelope.start_time, meta=dict(envelope.meta),
                          band_index=0, band=seg.band(0))]
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(x.size, 1.0 / envelope.sample_rate)
    bank = filter_bank(freqs, seg, gamma_cap)
    out = []
    for k in range(seg.n_bands):
        y = np.fft.irfft(spec * bank[k] ** 2, n=x.size)
        out.append(Component(y, envelope.sample_rate, unit=envelope.unit,
                             start_time=envelope.start_time, meta=dict(envelope.meta),
                             band_index=k, band=seg.band(k)))
    return out


def noise_sigma(x: np.ndarray) -> float:
    """Robust white-noise level from the MAD of first differences."""
    d = np.diff(x)
    if d.size == 0:
        return 0.0
    return float(np.median(np.abs(d - np.median(d))) / (0.6745 * math.sqrt(2)))


def dominant_frequency(x: np.ndarray, sample_rate: float) -> float:
    if x.size < 4:
        return 0.0
    mag = np.abs(np.fft.rfft((x - x.mean()) * np.hanning(x.size)))
    mag[:2] = 0.0
    k = int(np.argmax(mag))
    return k * sample_rate / x.size if mag[k] > 0 else 0.0


def smoothing_window(x: np.ndarray, sample_rate: float) -> int:
    """Odd moving-median length: 20 ms, shortened to a quarter period of the
    dominant oscillation so fast components keep their edges."""
    w = math.ceil(SMOOTH_SECONDS * sample_rate)
    f = dominant_frequency(x, sample_rate)
    if f > 0:
        w = min(w, int(sample_rate / (4 * f)))
    w = max(1, w)
    return w if w % 2 else w - 1 if w > 1 else 1


def regularize(component: SampledSignal, theta_rel: float = THETA_REL,
               theta_abs: float | None = None, window: int | None = None,
               band_index: int | None = None) -> RegularizedComponent:
    """Quantize a component into a step signal.

    The component is median-smoothed and a change is declared each time the
    smoothed signal passes from one side of its mid-level to the other by more
    than ``theta / 2``, with ``theta = max(theta_abs, theta_rel * p2p)``.  The
    change instant is the last mid-level crossing before the trigger.  Every
    plateau between changes is replaced by the median of its interior raw
    samples and ``k^(j)`` are the differences of consecutive plateau levels.
    """
    x = np.asarray(component.samples, dtype=float)
    fs = component.sample_rate
    if x.size < 16:
        raise SignalTooShort("regularization needs at least 16 samples")
    if band_index is None:
        band_index = getattr(component, "band_index", 0)
    w = smoothing_window(x, fs) if window is None else max(1, int(window))
    s = ndimage.median_filter(x, size=w, mode="nearest") if w > 1 else x
    if theta_abs is None:
        theta_abs = 3.0 * noise_sigma(x)
    lo_q, hi_q = np.percentile(s, [2.0, 98.0])
    p2p = float(s.max() - s.min())
    theta = max(theta_abs, theta_rel * p2p)
    mid = 0.5 * (lo_q + hi_q)

    idx = np.empty(0, dtype=np.int64)
    if p2p > 0 and theta < hi_q - lo_q:
        state = np.zeros(x.size, dtype=np.int8)
        state[s > mid + theta / 2] = 1
        state[s < mid - theta / 2] = -1
        marked = np.flatnonzero(state)
        if marked.size:
            st = state[marked]
            flips = np.flatnonzero(st[1:] != st[:-1]) + 1
            triggers = marked[flips]
            above = s > mid
            cross = np.flatnonzero(above[1:] != above[:-1]) + 1
            pos = np.searchsorted(cross, triggers, side="right") - 1
            idx = np.where(pos >= 0, cross[np.maximum(pos, 0)], triggers)
            prev = marked[flips - 1]
            idx = np.maximum(idx, prev + 1)
            idx = np.unique(idx)

    edges = np.concatenate(([0], idx, [x.size]))
    guard = w // 2
    levels = np.empty(edges.size - 1)
    step = np.empty_like(x)
    for j, (a, b) in enumerate(zip(edges[:-1], edges[1:])):
        inner = x[a + guard:b - guard] if b - a > 2 * guard + 2 else x[a:b]
        levels[j] = np.median(inner)
        step[a:b] = levels[j]
    changes = np.diff(levels)
    times = component.start_time + idx / fs
    sig = SampledSignal(step, fs, unit=component.unit, start_time=component.start_time,
                        meta=dict(component.meta))
    return RegularizedComponent(sig, times, changes, levels, theta, band_index, float(theta_abs))


@dataclass(frozen=True)
class LeakageReport:
    ratios: tuple[float, ...]
    flagged: tuple[bool, ...]
    fundamentals: tuple[float, ...]
    threshold: float = LEAKAGE_THRESHOLD
    home_band: tuple[int, ...] = field(default=())

    @property
    def any_flagged(self) -> bool:
        return any(self.flagged)


def harmonic_combs(spectrum: Spectrum, rel_floor: float = 0.01, max_harmonic: int = 40,
                   tol_bins: float = 2.0, max_lines: int = 200, min_distance: int = 4) -> tuple[np.ndarray, np.ndarray, dict[int, int]]:
    """Spectral lines and their grouping into harmonic trains.

    Lines are taken in descending magnitude; a line joins an existing train
    when it sits within ``tol_bins`` of an integer multiple ``n`` of that
    train's fundamental and is no larger than ``2 / n`` of the fundamental
    (the bound obeyed by rectangular waves of moderate duty); otherwise it
    starts a new train.  Only the ``max_lines`` strongest lines are kept.
    Returns line bins, fundamental bins, and the map line bin -> fundamental
    bin.
    """
    mag = spectrum.magnitudes
    if mag.max() <= 0:
        return np.zeros(0, int), np.zeros(0, int), {}
    # the distance keeps Hann sidelobes (2.5 and 3.5 bins out) from posing as lines
    lines, _ = find_peaks(mag, height=rel_floor * mag.max(), distance=min_distance)
    lines = lines[np.argsort(-mag[lines], kind="stable")][:max_lines]
    # interpolated positions keep n * f0 accurate for high harmonics
    la = np.log(mag[np.maximum(lines - 1, 0)] + 1e-300)
    lb = np.log(mag[lines] + 1e-300)
    lc = np.log(mag[np.minimum(lines + 1, mag.size - 1)] + 1e-300)
    denom = la - 2 * lb + lc
    delta = np.where(denom < 0, 0.5 * (la - lc) / np.where(denom < 0, denom, -1.0), 0.0)
    pos = lines + np.clip(delta, -0.5, 0.5)
    owner: dict[int, int] = {}
    f0s = np.zeros(0, dtype=np.int64)
    f0pos = np.zeros(0)
    for k, kp in zip(lines, pos):
        home = None
        if f0s.size:
            n = np.rint(kp / f0pos)
            ok = ((n >= 2) & (n <= max_harmonic) & (np.abs(kp - n * f0pos) <= tol_bins)
                  & (mag[k] * np.maximum(n, 1) <= 2.0 * mag[f0s]))
            hit = np.flatnonzero(ok)
            if hit.size:
                home = int(f0s[hit[0]])
        if home is None:
            f0s = np.append(f0s, k)
            f0pos = np.append(f0pos, kp)
            home = int(k)
        owner[int(k)] = home
    lines = np.sort(lines)
    fundamentals = f0s.tolist()
    return lines, np.array(sorted(fundamentals), dtype=int), owner


def leakage_diagnostic(components: Sequence[SampledSignal], seg: SpectrumSegmentation,
                       spectrum: Spectrum, threshold: float = LEAKAGE_THRESHOLD) -> LeakageReport:
    """Share of each component's spectral energy that belongs to a foreign train.

    A harmonic train's home is the component holding most of its fundamental.
    For every component the energy of lines (three Hann bins each) whose train
    lives elsewhere is divided by the component's total spectral energy.
    """
    lines, fundamentals, owner = harmonic_combs(spectrum)
    if lines.size == 0 or len(components) == 0:
        z = (0.0,) * seg.n_bands
        return LeakageReport(z, (False,) * seg.n_bands, (), threshold)
    power = np.array([magnitude_spectrum(c).magnitudes ** 2 for c in components])
    last = power.shape[1] - 1
    energy = (power[:, np.maximum(lines - 1, 0)] + power[:, lines]
              + power[:, np.minimum(lines + 1, last)])
    pos = {int(k): i for i, k in enumerate(lines)}
    home = {int(f0): int(np.argmax(energy[:, pos[int(f0)]])) for f0 in fundamentals}
    foreign = np.array([[home[owner[int(k)]] != b for k in lines] for b in range(len(components))])
    total = power.sum(axis=1)
    leaked = np.minimum((energy * foreign).sum(axis=1), total)
    ratios = np.divide(leaked, total, out=np.zeros_like(total), where=total > 0)
    df = spectrum.resolution
    return LeakageReport(tuple(float(r) for r in ratios),
                         tuple(bool(r > threshold) for r in ratios),
                         tuple(float(f * df) for f in fundamentals), threshold,
                         tuple(home[int(f)] for f in fundamentals))
