"""Per-component fundamental frequency and mean change amplitude."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .eewt import RegularizedComponent
from .errors import EmptyChanges, NoDominantPeak

MAD_K = 3.0


@dataclass(frozen=True)
class ComponentFeatures:
    f_i: float  # Hz
    A_i: float  # V
    n_changes_used: int
    n_outliers: int
    meter: str
    band_index: int


def fundamental_frequency(reg: RegularizedComponent, sample_rate: float | None = None) -> float:
    """Largest spectral line of the mean-removed step signal.

    Hann window; the peak bin is refined by a parabola through the log
    magnitudes of its neighbours.  DC and the first bin are ignored.
    """
    sig = reg.step_signal
    fs = sig.sample_rate if sample_rate is None else sample_rate
    x = sig.samples - sig.samples.mean()
    if x.size < 8 or not np.any(np.abs(x) > 1e-12 * max(1.0, np.abs(sig.samples).max())):
        raise NoDominantPeak("step signal is constant")
    mag = np.abs(np.fft.rfft(x * np.hanning(x.size)))
    mag[:2] = 0.0
    k = int(np.argmax(mag[:-1]))
    if mag[k] <= 0:
        raise NoDominantPeak("no spectral peak above DC")
    la, lb, lc = np.log(mag[k - 1:k + 2] + 1e-300)
    denom = la - 2 * lb + lc
    delta = 0.5 * (la - lc) / denom if denom < 0 else 0.0
    return float((k + np.clip(delta, -0.5, 0.5)) * fs / x.size)


def exclude_outliers(changes: Sequence[float], mad_floor: float = 0.0, k: float = MAD_K) -> np.ndarray:
    """Drop changes whose magnitude is more than ``k`` MADs from the median.

    The rule is reapplied until nothing more is removed, so the result is a
    fixed point.  ``mad_floor`` keeps it from collapsing when most changes are
    equal.
    """
    c = np.asarray(changes, dtype=float)
    if c.size == 0:
        raise EmptyChanges("no changes to filter")
    while True:
        mag = np.abs(c)
        med = np.median(mag)
        mad = max(float(np.median(np.abs(mag - med))), mad_floor)
        keep = np.abs(mag - med) <= k * mad
        if keep.all():
            return c
        c = c[keep]


def mean_amplitude(filtered: Sequence[float]) -> float:
    c = np.asarray(filtered, dtype=float)
    if c.size == 0:
        raise EmptyChanges("no changes to average")
    return float(np.mean(np.abs(c)))


def extract_features(reg: RegularizedComponent, meter: str,
                     mad_floor: float | None = None) -> ComponentFeatures:
    """``f_i`` and ``A_i`` of one regularized component.

    Raises :class:`NoDominantPeak` or :class:`EmptyChanges` when the component
    carries no usable step activity.
    """
    if reg.n_changes == 0:
        raise EmptyChanges("component has no changes")
    f = fundamental_frequency(reg)
    floor = reg.theta_abs if mad_floor is None else mad_floor
    kept = exclude_outliers(reg.changes, mad_floor=floor)
    return ComponentFeatures(f_i=f, A_i=mean_amplitude(kept), n_changes_used=int(kept.size),
                             n_outliers=int(reg.n_changes - kept.size), meter=meter,
                             band_index=reg.band_index)
