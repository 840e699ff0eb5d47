import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vfsloc.demod import CarrierEstimate, demodulate, envelope_of, estimate_carrier
from vfsloc.eewt import magnitude_spectrum
from vfsloc.errors import InvalidRate, NoCarrierFound, SignalTooShort
from vfsloc.signals import SampledSignal
from vfsloc.synth import Scenario, SourceSpec, analytic_envelope, synthesize_meter_voltage

FS = 12500.0


def tone(freq, amp=325.0, phase=0.4, duration=2.0, noise=0.0, seed=0):
    t = np.arange(int(duration * FS)) / FS
    x = amp * np.cos(2 * np.pi * freq * t + phase)
    if noise:
        x = x + np.random.default_rng(seed).normal(0, noise, t.size)
    return SampledSignal(x, FS)


@pytest.mark.parametrize("freq", [50.0, 49.8, 50.0123, 51.5])
def test_carrier_of_pure_tone(freq):
    est = estimate_carrier(tone(freq))
    assert est.frequency == pytest.approx(freq, abs=1e-6)
    assert est.phase == pytest.approx(0.4, abs=1e-6)
    assert est.amplitude == pytest.approx(325.0, rel=1e-6)


def test_carrier_with_noise():
    est = estimate_carrier(tone(50.02, noise=1.0))
    assert est.frequency == pytest.approx(50.02, abs=1e-3)


def test_carrier_errors():
    with pytest.raises(SignalTooShort):
        estimate_carrier(tone(50.0, duration=0.1))
    noise = SampledSignal(np.random.default_rng(1).normal(size=25000), FS)
    with pytest.raises(NoCarrierFound):
        estimate_carrier(noise)
    with pytest.raises(NoCarrierFound):
        estimate_carrier(tone(60.0))
    with pytest.raises(ValueError):
        CarrierEstimate(50.0, 0.0, 0.0)


def test_pure_carrier_gives_flat_rms_envelope():
    env = envelope_of(tone(50.0, amp=230 * np.sqrt(2), duration=4.0))
    assert env.sample_rate == 1250.0
    assert np.allclose(env.samples, 230.0, atol=1e-6)
    assert env.trim == 4 and env.start_time == pytest.approx(4 / 1250)


def test_invalid_rate():
    est = estimate_carrier(tone(50.0))
    with pytest.raises(InvalidRate):
        demodulate(tone(50.0), est, env_rate=7000.0)
    with pytest.raises(ValueError):
        demodulate(tone(50.0), est, method="hilbert")


def scenario(grid, f, depth, shape="sinusoidal", duration=8.0):
    # power giving the requested peak-to-peak depth at P6
    p6 = 476.62e-3 / 230.0  # V per W at P6 -> depth fraction per kW below
    power = depth * 230.0 / (p6 * 1e3)
    src = SourceSpec("P6", power, f, mod_shape=shape)
    return Scenario(grid, (src,), meters=("P6",), duration=duration, noise_rms=0.0)


def envelope_error(sc, method="synchronous"):
    env = envelope_of(synthesize_meter_voltage(sc, "P6"), method=method)
    ref = analytic_envelope(sc, "P6", env.sample_rate).samples
    ref = ref[env.trim:env.trim + len(env)]
    return np.sqrt(np.mean((env.samples - ref) ** 2)) / 230.0


def test_depth_mapping(grid):
    sc = scenario(grid, 1.0, 0.05, "rectangular")
    env = analytic_envelope(sc, "P6", 1250.0).samples
    assert env.max() - env.min() == pytest.approx(0.05 * 230.0, rel=1e-3)


@pytest.mark.parametrize("f", [0.25, 1.7, 8.8, 108.8])
def test_sinusoidal_round_trip_is_tight(grid, f):
    assert envelope_error(scenario(grid, f, 0.05)) < 1e-3


@pytest.mark.parametrize("f", [0.25, 1.7, 8.8])
def test_square_law_low_frequency(grid, f):
    sc = scenario(grid, f, 0.03, "rectangular")
    assert envelope_error(sc, "square_law") < 0.01
    env = envelope_of(synthesize_meter_voltage(sc, "P6"), method="square_law")
    assert env.cutoff == pytest.approx(40.0, rel=1e-6) and env.trim == 63


def test_108_8_hz_line_visible(grid):
    sc = scenario(grid, 108.8, 0.02, duration=10.0)
    spec = magnitude_spectrum(envelope_of(synthesize_meter_voltage(sc, "P6")))
    peak = spec.frequencies[np.argmax(spec.magnitudes)]
    assert peak == pytest.approx(108.8, abs=spec.resolution)


def test_same_trim_at_every_meter(grid):
    sc = Scenario(grid, (SourceSpec("P4", 2.0, 1.7),), meters=("P1", "P6"), duration=3.0)
    envs = [envelope_of(synthesize_meter_voltage(sc, m)) for m in sc.meters]
    assert len(envs[0]) == len(envs[1])
    assert envs[0].start_time == envs[1].start_time


@settings(max_examples=12, deadline=None)
@given(f=st.floats(0.2, 150.0), depth=st.floats(0.01, 0.05),
       shape=st.sampled_from(["sinusoidal", "rectangular"]))
def test_round_trip_within_one_percent(grid, f, depth, shape):
    assert envelope_error(scenario(grid, f, depth, shape, duration=4.0)) <= 0.01
