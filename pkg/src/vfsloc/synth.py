"""Synchronized multi-point voltage waveforms for disturbance scenarios.

Each disturbing load is a resistive current step ``P / U_nom`` switched on and
off by a modulation waveform.  At a meter the RMS envelope is

    U(t) = U_nom - sum_i dU_i(meter) * g_i(t)

with ``dU_i`` from :func:`vfsloc.grid.coupling_coefficient`, and the recorded
waveform is ``sqrt(2) * U(t) * cos(2 pi f_c t + phi)`` plus white noise.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import SampleRateTooLow, UnknownCase
from .grid import GridModel, coupling_coefficient, default_grid
from .signals import SampledSignal

SAMPLE_RATE = 12_500.0
DEFAULT_METERS = ("P1", "P3", "P4", "P6")
SHAPES = ("rectangular", "sinusoidal")


@dataclass(frozen=True)
class SourceSpec:
    node: str
    power: float  # kW
    mod_frequency: float  # Hz
    duty: float = 0.5
    mod_shape: str = "rectangular"
    phase: float = 0.0  # rad
    name: str = ""

    def __post_init__(self):
        if not self.power > 0:
            raise ValueError("power must be positive")
        if not self.mod_frequency > 0:
            raise ValueError("mod_frequency must be positive")
        if not 0 < self.duty < 1:
            raise ValueError("duty must lie in (0, 1)")
        if self.mod_shape not in SHAPES:
            raise ValueError(f"mod_shape must be one of {SHAPES}")


@dataclass(frozen=True)
class Scenario:
    grid: GridModel
    sources: tuple[SourceSpec, ...]
    meters: tuple[str, ...] = DEFAULT_METERS
    duration: float = 60.0
    carrier_frequency: float = 50.0
    noise_rms: float = 0.1
    sample_rate: float = SAMPLE_RATE
    carrier_phase: float = 0.0
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        object.__setattr__(self, "meters", tuple(self.meters))
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if not self.meters:
            raise ValueError("at least one meter is required")
        if self.noise_rms < 0:
            raise ValueError("noise_rms must be non-negative")
        for node in self.meters:
            self.grid.check_node(node)
        for s in self.sources:
            self.grid.check_node(s.node)

    def with_(self, **changes) -> "Scenario":
        return replace(self, **changes)

    def metadata(self) -> dict:
        return {
            "scenario": self.name,
            "duration_s": self.duration,
            "carrier_frequency_hz": self.carrier_frequency,
            "noise_rms_v": self.noise_rms,
            "u_nominal_v": self.grid.u_nominal,
            "seed": self.seed,
            "sources": [
                {"name": s.name, "node": s.node, "power_kw": s.power,
                 "mod_frequency_hz": s.mod_frequency, "duty": s.duty,
                 "mod_shape": s.mod_shape, "phase_rad": s.phase}
                for s in self.sources
            ],
        }


def _n_samples(sample_rate, duration):
    return int(round(duration * sample_rate))


def modulation_waveform(spec: SourceSpec, sample_rate: float, duration: float) -> SampledSignal:
    """On/off state of a load in [0, 1]; 1 means the load draws current."""
    if sample_rate < 8 * spec.mod_frequency:
        raise SampleRateTooLow(
            f"{sample_rate} Hz cannot represent {spec.mod_frequency} Hz modulation")
    t = np.arange(_n_samples(sample_rate, duration)) / sample_rate
    if spec.mod_shape == "rectangular":
        cycle = np.mod(spec.mod_frequency * t + spec.phase / (2 * np.pi), 1.0)
        g = (cycle < spec.duty).astype(float)
    else:
        g = 0.5 * (1.0 + np.sin(2 * np.pi * spec.mod_frequency * t + spec.phase))
    return SampledSignal(g, sample_rate, unit="dimensionless")


def fluctuation_amplitude(scenario: Scenario, source: SourceSpec, meter: str) -> float:
    """Envelope dip (V) caused at ``meter`` when ``source`` switches on."""
    current = source.power * 1e3 / scenario.grid.u_nominal
    return coupling_coefficient(scenario.grid, source.node, meter, current)


def analytic_envelope(scenario: Scenario, meter: str, sample_rate: float | None = None) -> SampledSignal:
    """Ground-truth RMS envelope at ``meter``, optionally at another rate."""
    scenario.grid.check_node(meter)
    fs = scenario.sample_rate if sample_rate is None else sample_rate
    env = np.full(_n_samples(fs, scenario.duration), scenario.grid.u_nominal)
    for s in scenario.sources:
        g = modulation_waveform(s, fs, scenario.duration).samples
        env -= fluctuation_amplitude(scenario, s, meter) * g
    return SampledSignal(env, fs, unit="volt", meta={"meter": meter})


def synthesize_meter_voltage(scenario: Scenario, meter: str) -> SampledSignal:
    if meter not in scenario.meters:
        scenario.grid.check_node(meter)
        raise ValueError(f"{meter} is not a meter of this scenario")
    env = analytic_envelope(scenario, meter).samples
    t = np.arange(env.size) / scenario.sample_rate
    u = np.sqrt(2.0) * env * np.cos(2 * np.pi * scenario.carrier_frequency * t
                                    + scenario.carrier_phase)
    if scenario.noise_rms > 0:
        index = scenario.grid.nodes.index(meter)
        rng = np.random.default_rng([scenario.seed, index])
        u = u + rng.normal(0.0, scenario.noise_rms, u.size)
    meta = {"meter": meter}
    meta.update(scenario.metadata())
    return SampledSignal(u, scenario.sample_rate, unit="volt", meta=meta)


def synthesize(scenario: Scenario) -> dict[str, SampledSignal]:
    return {m: synthesize_meter_voltage(scenario, m) for m in scenario.meters}


# Table II.  Load ratings: VFS1 2 kW, VFS2 3 kW, VFS3 0.4 kW.
_RATINGS = {"VFS1": 2.0, "VFS2": 3.0, "VFS3": 0.4}
CASES = {
    "case1": (("VFS1", 1.7, "P4"), ("VFS2", 0.25, "P4")),
    "case2": (("VFS1", 1.7, "P3"), ("VFS2", 0.25, "P4")),
    "case3": (("VFS1", 0.23, "P3"), ("VFS2", 9.11, "P6"), ("VFS3", 1.67, "P4")),
    "case4": (("VFS1", 108.8, "P6"), ("VFS2", 91.2, "P3"), ("VFS3", 8.8, "P4")),
    "case5": (("VFS1", 0.7, "P6"), ("VFS2", 0.1, "P3"), ("VFS3", 2.5, "P4")),
}
DEFAULT_DUTY = {"case1": 0.5, "case2": 0.5, "case3": 0.35, "case4": 0.35, "case5": 0.35}
# loads are not switched in sync with each other
_PHASES = {"VFS1": 0.0, "VFS2": 1.3, "VFS3": 2.9}

_ROMAN = {"I": "case1", "II": "case2", "III": "case3", "IV": "case4", "V": "case5"}


def case_name(case_id) -> str:
    key = str(case_id).strip()
    if key.upper() in _ROMAN:
        key = _ROMAN[key.upper()]
    elif key.isdigit():
        key = f"case{key}"
    key = key.lower()
    if key not in CASES:
        raise UnknownCase(f"unknown case {case_id!r}; expected one of {', '.join(CASES)}")
    return key


def case_scenario(case_id, grid: GridModel | None = None, *, duty: float | None = None,
                  meters: Sequence[str] = DEFAULT_METERS, noise_rms: float = 0.1,
                  mod_shape: str = "rectangular", seed: int = 0, **kwargs) -> Scenario:
    key = case_name(case_id)
    grid = default_grid() if grid is None else grid
    d = DEFAULT_DUTY[key] if duty is None else duty
    sources = tuple(
        SourceSpec(node=node, power=_RATINGS[name], mod_frequency=f, duty=d,
                   mod_shape=mod_shape, phase=_PHASES[name], name=name)
        for name, f, node in CASES[key]
    )
    return Scenario(grid=grid, sources=sources, meters=tuple(meters), noise_rms=noise_rms,
                    seed=seed, name=key, **kwargs)


def run_case(case_id, grid: GridModel | None = None, **kwargs) -> dict[str, SampledSignal]:
    """Synthesize every meter signal of a Table II case preset."""
    return synthesize(case_scenario(case_id, grid, **kwargs))
