import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vfsloc.errors import SampleRateTooLow, UnknownCase, UnknownNode
from vfsloc.synth import (CASES, Scenario, SourceSpec, analytic_envelope, case_name,
                          case_scenario, fluctuation_amplitude, modulation_waveform, run_case,
                          synthesize, synthesize_meter_voltage)

TABLE_II = {
    "case1": {(1.7, "P4"), (0.25, "P4")},
    "case2": {(1.7, "P3"), (0.25, "P4")},
    "case3": {(0.23, "P3"), (9.11, "P6"), (1.67, "P4")},
    "case4": {(108.8, "P6"), (91.2, "P3"), (8.8, "P4")},
    "case5": {(0.7, "P6"), (0.1, "P3"), (2.5, "P4")},
}


@pytest.mark.parametrize("case", sorted(TABLE_II))
def test_presets_follow_table(case):
    sc = case_scenario(case)
    assert {(s.mod_frequency, s.node) for s in sc.sources} == TABLE_II[case]
    assert sc.duration == 60.0
    assert all(s.mod_shape == "rectangular" for s in sc.sources)
    ratings = {s.name: s.power for s in sc.sources}
    assert ratings["VFS1"] == 2.0 and ratings["VFS2"] == 3.0
    assert ratings.get("VFS3", 0.4) == 0.4


@pytest.mark.parametrize("alias", ["I", "ii", "3", "case4", "V"])
def test_case_aliases(alias):
    assert case_name(alias) in CASES


def test_unknown_case():
    with pytest.raises(UnknownCase):
        case_scenario("case9")


def test_case5_dimensions():
    sig = run_case("case5", noise_rms=0.0)
    assert sorted(sig) == ["P1", "P3", "P4", "P6"]
    assert all(len(s) == 750_000 and s.sample_rate == 12_500 for s in sig.values())


def test_envelope_dip_matches_coupling(grid):
    sc = Scenario(grid, (SourceSpec("P3", 3.0, 1.0),), meters=("P3", "P4"), duration=4.0,
                  noise_rms=0.0)
    assert fluctuation_amplitude(sc, sc.sources[0], "P3") == pytest.approx(4.080, abs=1e-3)
    env = analytic_envelope(sc, "P3", sample_rate=1000.0).samples
    assert set(np.round(np.unique(env), 3)) == {230.0 - 4.080, 230.0}
    assert np.mean(env < 230) == pytest.approx(0.5, abs=1e-3)


def test_noise_free_waveform_rms_is_envelope(grid):
    sc = Scenario(grid, (SourceSpec("P4", 2.0, 0.5),), meters=("P4",), duration=2.0,
                  noise_rms=0.0)
    u = synthesize_meter_voltage(sc, "P4").samples
    env = analytic_envelope(sc, "P4").samples
    per = 250  # one 50 Hz period at 12.5 kHz
    rms = np.sqrt(np.mean(u[:per] ** 2))
    assert rms == pytest.approx(env[0], rel=1e-9)


def test_noise_is_reproducible_and_per_meter(grid):
    sc = case_scenario("case1", duration=1.0, seed=5)
    a, b = synthesize(sc), synthesize(sc)
    assert np.array_equal(a["P3"].samples, b["P3"].samples)
    assert not np.array_equal(a["P3"].samples - analytic_envelope(sc, "P3").samples,
                              a["P6"].samples - analytic_envelope(sc, "P6").samples)


def test_metadata_lists_sources():
    sig = run_case("case3", duration=1.0)
    freqs = sorted(s["mod_frequency_hz"] for s in sig["P1"].meta["sources"])
    assert freqs == [0.23, 1.67, 9.11]


def test_validation(grid):
    with pytest.raises(ValueError):
        SourceSpec("P3", -1.0, 1.0)
    with pytest.raises(ValueError):
        SourceSpec("P3", 1.0, 1.0, duty=1.0)
    with pytest.raises(UnknownNode):
        Scenario(grid, (SourceSpec("P9", 1.0, 1.0),))
    with pytest.raises(SampleRateTooLow):
        modulation_waveform(SourceSpec("P3", 1.0, 200.0), 1000.0, 1.0)


@settings(max_examples=40, deadline=None)
@given(f=st.floats(0.1, 20.0), duty=st.floats(0.1, 0.9), phase=st.floats(0, 6.28))
def test_rectangle_duty_and_levels(f, duty, phase):
    g = modulation_waveform(SourceSpec("P3", 1.0, f, duty=duty, phase=phase), 2000.0, 30.0)
    assert set(np.unique(g.samples)) <= {0.0, 1.0}
    # whole periods only, so the on-fraction equals the duty up to edge samples
    n = int(np.floor(30.0 * f)) / f * 2000.0
    on = g.samples[:int(n)].mean()
    assert on == pytest.approx(duty, abs=2 * f / 2000.0 * 2 + 1e-3)


@settings(max_examples=30, deadline=None)
@given(p=st.floats(0.1, 5.0), node=st.sampled_from(["P3", "P4", "P6"]))
def test_superposition(grid, p, node):
    a = SourceSpec(node, p, 1.0)
    b = SourceSpec("P4", 1.0, 3.0)
    sc = lambda src: Scenario(grid, src, meters=("P1", "P6"), duration=2.0, noise_rms=0.0)
    both = analytic_envelope(sc((a, b)), "P6", 500.0).samples
    only_a = analytic_envelope(sc((a,)), "P6", 500.0).samples
    only_b = analytic_envelope(sc((b,)), "P6", 500.0).samples
    assert np.allclose(230.0 - both, (230.0 - only_a) + (230.0 - only_b))
