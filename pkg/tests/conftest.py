import functools
import time

import numpy as np
import pytest

from vfsloc.demod import envelope_of
from vfsloc.grid import default_grid
from vfsloc.locator import LocatorConfig, locate_sources
from vfsloc.signals import SampledSignal
from vfsloc.synth import run_case


@pytest.fixture(scope="session")
def grid():
    return default_grid()


# wall-clock seconds per cached stage, keyed like the caches below
TIMINGS: dict = {}
# (criterion, passed, detail) lines collected by the acceptance tests
ACCEPTANCE: list = []


@functools.lru_cache(maxsize=None)
def case_envelopes(case, duty=None, seed=0):
    t0 = time.perf_counter()
    signals = run_case(case, duty=duty, seed=seed)
    out = {m: envelope_of(s) for m, s in signals.items()}
    TIMINGS[("envelopes", case, duty, seed)] = time.perf_counter() - t0
    return out


@functools.lru_cache(maxsize=None)
def case_result(case, duty=None, boundaries=None):
    cfg = LocatorConfig() if boundaries is None else LocatorConfig(boundaries=dict(boundaries))
    envs = case_envelopes(case, duty)
    t0 = time.perf_counter()
    out = locate_sources(envs, default_grid(), cfg)
    TIMINGS[("locate", case, duty, boundaries)] = time.perf_counter() - t0
    return out


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")


@pytest.fixture(scope="session")
def envelopes_for():
    return case_envelopes


@pytest.fixture(scope="session")
def result_for():
    return case_result


def rectangle(freq, amp, fs=1250.0, duration=60.0, duty=0.5, phase=0.0, offset=230.0):
    t = np.arange(int(round(duration * fs))) / fs
    on = np.mod(freq * t + phase, 1.0) < duty
    return SampledSignal(offset - amp * on, fs)


def tones(freqs, amps, fs=1250.0, duration=60.0, offset=230.0):
    t = np.arange(int(round(duration * fs))) / fs
    x = offset + sum(a * np.sin(2 * np.pi * f * t) for f, a in zip(freqs, amps))
    return SampledSignal(x, fs)
