import json

import numpy as np
import pytest
from click.testing import CliRunner

from vfsloc.cli import EXIT_CONFIG, EXIT_INGEST, main
from vfsloc.signals import SampledSignal, write_raw
from vfsloc.synth import SAMPLE_RATE


@pytest.fixture
def runner():
    return CliRunner()


@pytest.mark.slow
def test_run_case1(runner, tmp_path):
    out = tmp_path / "o"
    res = runner.invoke(main, ["run", "--case", "case1", "--out", str(out)])
    assert res.exit_code == 0, res.output
    rep = json.loads((out / "report.json").read_text())
    pts = sorted((s["supply_point"], round(s["f_hz"], 2)) for s in rep["sources"])
    assert pts == [("P4", 0.25), ("P4", 1.7)]
    trace = json.loads((out / "trace.json").read_text())
    assert trace["n_stop"] == 2


@pytest.mark.slow
def test_report_byte_stable(runner, tmp_path):
    args = ["run", "--case", "case1", "--window", "30"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert runner.invoke(main, args + ["--out", str(a)]).exit_code == 0
    assert runner.invoke(main, args + ["--out", str(b)]).exit_code == 0
    for name in ("report.json", "trace.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_missing_manifest(runner, tmp_path):
    res = runner.invoke(main, ["run", "--manifest", str(tmp_path / "missing.toml")])
    assert res.exit_code == EXIT_CONFIG


def test_run_needs_input(runner, tmp_path):
    res = runner.invoke(main, ["run", "--out", str(tmp_path)])
    assert res.exit_code == EXIT_CONFIG


def test_bad_case(runner, tmp_path):
    res = runner.invoke(main, ["synth", "--case", "case9", "--out", str(tmp_path)])
    assert res.exit_code == EXIT_CONFIG


def test_synth_case5(runner, tmp_path):
    res = runner.invoke(main, ["synth", "--case", "case5", "--out", str(tmp_path)])
    assert res.exit_code == 0, res.output
    for m in ("P1", "P3", "P4", "P6"):
        assert (tmp_path / f"{m}.f64").stat().st_size == int(60 * SAMPLE_RATE) * 8
    assert (tmp_path / "manifest.toml").exists()
    meta = json.loads((tmp_path / "scenario.json").read_text())
    assert len(meta["sources"]) == 3


def test_synth_case3_metadata(runner, tmp_path):
    assert runner.invoke(main, ["synth", "--case", "case3", "--out", str(tmp_path),
                                "--format", "csv"]).exit_code == 0
    meta = json.loads((tmp_path / "scenario.json").read_text())
    assert sorted(s["mod_frequency_hz"] for s in meta["sources"]) == [0.23, 1.67, 9.11]


@pytest.mark.slow
def test_custom_scenario_roundtrip(runner, tmp_path):
    scen = tmp_path / "s.toml"
    scen.write_text('duration = 20.0\nseed = 3\n\n[[sources]]\nnode = "P6"\npower = 3.0\n'
                    'mod_frequency = 2.0\nmod_shape = "sinusoidal"\n')
    data = tmp_path / "d"
    assert runner.invoke(main, ["synth", "--scenario", str(scen), "--out", str(data)]).exit_code == 0
    out = tmp_path / "o"
    res = runner.invoke(main, ["run", "--manifest", str(data / "manifest.toml"), "--out", str(out)])
    assert res.exit_code == 0, res.output
    rep = json.loads((out / "report.json").read_text())
    assert [(s["supply_point"], round(s["f_hz"], 1)) for s in rep["sources"]] == [("P6", 2.0)]


def _leakage(path):
    rows = path.read_text().splitlines()[1:]
    return [(m, int(b), float(r), f == "1") for m, b, r, f in (x.split(",") for x in rows)]


@pytest.mark.slow
def test_diag_case5_flags_overlap(runner, tmp_path):
    data = tmp_path / "d"
    assert runner.invoke(main, ["synth", "--case", "case5", "--out", str(data)]).exit_code == 0
    out = tmp_path / "o"
    res = runner.invoke(main, ["diag", "--manifest", str(data / "manifest.toml"), "-n", "3",
                               "--out", str(out)])
    assert res.exit_code == 0, res.output
    rows = _leakage(out / "leakage.csv")
    assert len(rows) == 12 and any(f for *_, f in rows)
    assert len((out / "boundaries.csv").read_text().splitlines()) == 1 + 4 * 2
    assert (out / "spectrum_P3.csv").exists()


def test_diag_pure_carrier(runner, tmp_path):
    fs = 10000.0
    t = np.arange(int(10 * fs)) / fs
    paths = []
    for k, m in enumerate(("P3", "P4")):
        sig = SampledSignal(230 * np.sqrt(2) * np.cos(2 * np.pi * 50 * t)
                            + 0.01 * np.random.default_rng(k).standard_normal(t.size), fs)
        p = tmp_path / f"{m}.f64"
        write_raw(sig, p)
        paths.append(f"{m}={p}")
    out = tmp_path / "o"
    res = runner.invoke(main, ["diag", *paths, "-n", "2", "--out", str(out)])
    assert res.exit_code == 0, res.output
    assert len(_leakage(out / "leakage.csv")) == 4


def test_diag_rate_mismatch(runner, tmp_path):
    a = SampledSignal(np.cos(2 * np.pi * 50 * np.arange(20000) / 10000.0), 10000.0)
    b = SampledSignal(np.cos(2 * np.pi * 50 * np.arange(16000) / 8000.0), 8000.0)
    write_raw(a, tmp_path / "a.f64")
    write_raw(b, tmp_path / "b.f64")
    mf = tmp_path / "m.toml"
    mf.write_text('[[meters]]\nnode = "P3"\npath = "a.f64"\nsample_rate = 10000.0\n'
                  '[[meters]]\nnode = "P4"\npath = "b.f64"\nsample_rate = 8000.0\n')
    res = runner.invoke(main, ["diag", "--manifest", str(mf), "--out", str(tmp_path / "o")])
    assert res.exit_code == EXIT_INGEST
