"""``vfsloc`` command line: ``run``, ``synth`` and ``diag``.

Recordings are described by a TOML manifest::

    grid = "grid_table1"          # optional, package grid name or file
    nominal_frequency = 50.0      # optional

    [[meters]]
    node = "P1"
    path = "p1.csv"               # CSV (time_s,value_v) or .f64 + .json
    sample_rate = 12500           # optional for CSV, inferred from time
    unit = "volt"                 # optional

Custom synthesis scenarios use the same format with ``[[sources]]`` tables
(``node``, ``power`` kW, ``mod_frequency`` Hz, optional ``duty``,
``mod_shape``, ``phase``) and top-level ``meters``, ``duration``,
``noise_rms``, ``seed``.
"""
from __future__ import annotations

import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import click
import numpy as np

from . import eewt, synth
from .demod import ENV_RATE, envelope_of
from .errors import ConfigInvalid, IngestFailed, VfslocError
from .grid import GridModel, load_grid
from .locator import (IterationTrace, LocatorConfig, SourceReport, combined_spectrum,
                      locate_sources)
from .signals import SampledSignal, read_signal, write_csv, write_raw

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger("vfsloc")

EXIT_CONFIG = 2
EXIT_INGEST = 3
EXIT_PIPELINE = 1


@dataclass
class RunConfig:
    grid: str = "grid_table1"
    case: str | None = None
    manifest: Path | None = None
    meters: tuple[str, ...] = synth.DEFAULT_METERS
    window: float = 60.0
    env_rate: float = ENV_RATE
    n_max: int = 8
    freq_tol_abs: float = 0.05
    freq_tol_rel: float = 0.03
    tie_tol: float = 0.02
    out_dir: Path = Path("vfsloc_out")
    emit_plots: bool = False
    emit_csv: bool = False
    duty: float | None = None
    noise_rms: float = 0.1
    seed: int = 0
    demod_method: str = "synchronous"
    segmentation: str = "common"
    boundaries: Mapping[int, Sequence[float]] = field(default_factory=dict)

    def validate(self) -> None:
        if (self.case is None) == (self.manifest is None):
            raise ConfigInvalid("give exactly one of --case or --manifest")
        if self.manifest is not None and not Path(self.manifest).is_file():
            raise ConfigInvalid(f"manifest {self.manifest} not found")
        if not self.window > 0:
            raise ConfigInvalid("window length must be positive")
        if self.n_max < 2:
            raise ConfigInvalid("n_max must be at least 2")
        if not (0 <= self.tie_tol < 1):
            raise ConfigInvalid("tie tolerance must lie in [0, 1)")
        try:
            Path(self.out_dir).mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigInvalid(f"cannot create output directory: {exc}") from exc

    def locator_config(self) -> LocatorConfig:
        return LocatorConfig(n_max=self.n_max, freq_tol_abs=self.freq_tol_abs,
                             freq_tol_rel=self.freq_tol_rel, tie_tol=self.tie_tol,
                             segmentation=self.segmentation, boundaries=dict(self.boundaries))


def _load_toml(path: Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigInvalid(f"{path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigInvalid(f"{path}: {exc}") from exc


def _grid(name_or_path: str) -> GridModel:
    try:
        return load_grid(name_or_path)
    except FileNotFoundError:
        raise ConfigInvalid(f"grid {name_or_path!r} not found") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigInvalid(f"grid {name_or_path!r}: {exc}") from exc


def load_manifest(path: Path) -> tuple[dict[str, SampledSignal], dict]:
    """Read every meter of a manifest and trim them to their common overlap."""
    path = Path(path)
    doc = _load_toml(path)
    entries = doc.get("meters")
    if not isinstance(entries, list) or not entries:
        raise ConfigInvalid(f"{path}: needs at least one [[meters]] table")
    signals: dict[str, SampledSignal] = {}
    for e in entries:
        if "node" not in e or "path" not in e:
            raise ConfigInvalid(f"{path}: every meter needs node and path")
        p = Path(e["path"])
        if not p.is_absolute():
            p = path.parent / p
        sig = read_signal(p, e.get("sample_rate"))
        if "unit" in e and e["unit"] != sig.unit:
            sig = sig.replace(unit=e["unit"])
        if str(e["node"]) in signals:
            raise ConfigInvalid(f"{path}: meter {e['node']} listed twice")
        signals[str(e["node"])] = sig
    return align(signals), doc


def align(signals: Mapping[str, SampledSignal]) -> dict[str, SampledSignal]:
    """Trim signals to the span they all cover; they must share a sample rate."""
    rates = {s.sample_rate for s in signals.values()}
    if len(rates) != 1:
        raise IngestFailed("all meters must share one sample rate")
    fs = rates.pop()
    start = max(s.start_time for s in signals.values())
    stop = min(s.start_time + s.duration for s in signals.values())
    n = int(np.floor((stop - start) * fs + 1e-9))
    if n <= 0:
        raise IngestFailed("meter recordings do not overlap")
    out = {}
    for m, s in signals.items():
        i0 = int(round((start - s.start_time) * fs))
        out[m] = s.slice(i0, i0 + n)
    return out


def scenario_from_toml(path: Path, grid: GridModel) -> synth.Scenario:
    doc = _load_toml(path)
    try:
        sources = tuple(synth.SourceSpec(**src) for src in doc.get("sources", []))
        kw = {k: doc[k] for k in ("duration", "noise_rms", "carrier_frequency", "sample_rate",
                                  "carrier_phase", "seed", "name") if k in doc}
        meters = tuple(doc.get("meters", synth.DEFAULT_METERS))
        return synth.Scenario(grid=grid, sources=sources, meters=meters, **kw)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigInvalid(f"{path}: {exc}") from exc


def _round(x, nd=6):
    return float(round(float(x), nd))


def trace_to_dict(trace: IterationTrace) -> dict:
    its = []
    for it in trace.iterations:
        its.append({
            "n": it.n,
            "boundaries_hz": {m: [_round(b, 4) for b in s.boundaries]
                              for m, s in sorted(it.segmentations.items())},
            "features": {m: [{"band": f.band_index, "f_hz": _round(f.f_i, 4),
                              "mean_amplitude_v": _round(f.A_i, 4),
                              "changes_used": f.n_changes_used, "outliers": f.n_outliers}
                             for f in fs] for m, fs in sorted(it.features.items())},
            "groups": [{"f_hz": _round(g.f_i, 4), "point": g.indicated_point,
                        "band": g.band_index,
                        "profile_v": {k: _round(v, 4) for k, v in sorted(g.profile.entries.items())},
                        "shape_score": None if not np.isfinite(g.shape_score)
                        else _round(g.shape_score, 4)}
                       for g in it.groups],
            "sources": [{"f_hz": _round(s.f_i, 4), "point": s.supply_point,
                         "related_hz": [_round(f, 4) for f in s.related_frequencies]}
                        for s in it.sources],
            "leakage": {m: {"ratios": [_round(r, 4) for r in rep.ratios],
                            "flagged": list(rep.flagged)}
                        for m, rep in sorted(it.leakage.items())},
        })
    return {
        "n_stop": trace.n_stop,
        "stopped_on_shared_point": trace.stopped,
        "identification_iteration": trace.identification_n,
        "localization_set": [{"f_hz": _round(s.f_i, 4), "point": s.supply_point}
                             for s in trace.localization_set],
        "identification_set": [{"f_hz": _round(s.f_i, 4), "point": s.supply_point}
                               for s in trace.identification_set],
        "iterations": its,
    }


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def spectrum_rows(spectrum: eewt.Spectrum, boundaries: Sequence[float]) -> np.ndarray:
    """``frequency_hz, magnitude_v, boundary`` rows; the flag marks the bin
    nearest to each boundary."""
    flag = np.zeros(len(spectrum), dtype=int)
    for b in boundaries:
        flag[int(round(b / spectrum.resolution))] = 1
    return np.column_stack([spectrum.frequencies, spectrum.magnitudes, flag])


def write_spectrum_csv(path: Path, spectrum: eewt.Spectrum, boundaries: Sequence[float],
                       components: Sequence[SampledSignal] = ()) -> None:
    rows = spectrum_rows(spectrum, boundaries)
    header = ["frequency_hz", "magnitude_v", "boundary"]
    cols = [rows]
    for k, c in enumerate(components):
        cols.append(eewt.magnitude_spectrum(c).magnitudes[:, None])
        header.append(f"band{k}_magnitude_v")
    data = np.hstack(cols)
    fmts = ["%.6f", "%.6g", "%d"] + ["%.6g"] * len(components)
    np.savetxt(path, data, delimiter=",", fmt=fmts, header=",".join(header), comments="")


def _plot_spectrum(csv_path: Path, svg_path: Path, fmax: float) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    data = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    keep = data[:, 0] <= fmax
    fig, ax = plt.subplots(figsize=(8, 3.5))
    ax.plot(data[keep, 0], data[keep, 1], lw=0.8, color="k", label="envelope")
    for k in range(3, data.shape[1]):
        ax.plot(data[keep, 0], data[keep, k], lw=0.6, label=f"band {k - 3}")
    for f in data[(data[:, 2] == 1) & keep, 0]:
        ax.axvline(f, color="r", ls="--", lw=0.7)
    ax.set_xlabel("frequency [Hz]")
    ax.set_ylabel("magnitude [V]")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(svg_path, metadata={"Date": None})
    plt.close(fig)


def _plot_series(paths: Sequence[Path], svg_path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(len(paths), 1, figsize=(8, 1.8 * len(paths)), sharex=True,
                             squeeze=False)
    for ax, p in zip(axes[:, 0], paths):
        d = np.loadtxt(p, delimiter=",", skiprows=1, ndmin=2)
        ax.plot(d[:, 0], d[:, 1], lw=0.6, color="k")
        ax.set_title(p.stem, fontsize=8)
    axes[-1, 0].set_xlabel("time [s]")
    fig.tight_layout()
    fig.savefig(svg_path, metadata={"Date": None})
    plt.close(fig)


def _emit_diagnostics(out: Path, envelopes, trace: IterationTrace, plots: bool) -> None:
    it = trace.iteration(trace.identification_n)
    fmax = 4 * max((s.f_i for s in trace.identification_set), default=10.0)
    for m, env in envelopes.items():
        seg = it.segmentations[m]
        comps = eewt.decompose(env, seg, trace.config.gamma_cap)
        spec_csv = out / f"spectrum_{m}.csv"
        write_spectrum_csv(spec_csv, eewt.magnitude_spectrum(env), seg.boundaries, comps)
        series = [write_csv(env, out / f"series_{m}_envelope.csv")]
        for k, (c, r) in enumerate(zip(comps, it.regularized[m])):
            series.append(write_csv(c, out / f"series_{m}_band{k}_component.csv"))
            series.append(write_csv(r.step_signal, out / f"series_{m}_band{k}_step.csv"))
        if plots:
            _plot_spectrum(spec_csv, out / f"spectrum_{m}.svg", fmax)
            _plot_series(series, out / f"series_{m}.svg")


def execute_run(cfg: RunConfig) -> tuple[SourceReport, IterationTrace]:
    """The whole pipeline for one configuration; writes report and trace."""
    cfg.validate()
    out = Path(cfg.out_dir)
    if cfg.manifest is not None:
        signals, doc = load_manifest(cfg.manifest)
        grid = _grid(doc.get("grid", cfg.grid))
        fc = float(doc.get("nominal_frequency", 50.0))
        fs = next(iter(signals.values())).sample_rate
        n = int(round(cfg.window * fs))
        signals = {m: s.slice(0, n) for m, s in signals.items()}
        source = {"manifest": str(cfg.manifest)}
    else:
        grid = _grid(cfg.grid)
        try:
            scen = synth.case_scenario(cfg.case, grid, duty=cfg.duty, meters=cfg.meters,
                                       noise_rms=cfg.noise_rms, seed=cfg.seed,
                                       duration=cfg.window)
        except KeyError as exc:
            raise ConfigInvalid(str(exc)) from exc
        signals = synth.synthesize(scen)
        fc = scen.carrier_frequency
        source = {"case": scen.name, "scenario": scen.metadata()}
    envelopes = {m: envelope_of(s, fc, cfg.env_rate, cfg.demod_method)
                 for m, s in signals.items()}
    report, trace = locate_sources(envelopes, grid, cfg.locator_config())
    doc = report.to_dict()
    doc["input"] = source
    _dump_json(doc, out / "report.json")
    _dump_json(trace_to_dict(trace), out / "trace.json")
    if cfg.emit_csv or cfg.emit_plots:
        try:
            _emit_diagnostics(out, envelopes, trace, cfg.emit_plots)
        except ImportError as exc:  # plotting never gates the report
            log.warning("plots skipped: %s", exc)
    return report, trace


def _fail(exc: Exception) -> None:
    click.echo(f"error: {exc}", err=True)
    if isinstance(exc, ConfigInvalid):
        sys.exit(EXIT_CONFIG)
    if isinstance(exc, IngestFailed):
        sys.exit(EXIT_INGEST)
    sys.exit(EXIT_PIPELINE)


def _parse_boundaries(path: Path | None) -> dict[int, list[float]]:
    """``[boundaries]`` table mapping band counts to boundary lists, e.g. ``2 = [0.9]``."""
    if path is None:
        return {}
    table = _load_toml(path).get("boundaries", {})
    try:
        return {int(k): [float(b) for b in v] for k, v in table.items()}
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"{path}: {exc}") from exc


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging (-v info, -vv debug).")
def main(verbose: int) -> None:
    """Locate voltage fluctuation sources from multi-point voltage recordings."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--case", "case", default=None, help="Built-in case preset (case1..case5).")
@click.option("--manifest", type=click.Path(path_type=Path), default=None,
              help="TOML manifest of recorded meter signals.")
@click.option("--grid", default="grid_table1", show_default=True,
              help="Grid name shipped with the package or path to a grid TOML file.")
@click.option("--meters", default=",".join(synth.DEFAULT_METERS), show_default=True,
              help="Comma separated meter nodes (presets only).")
@click.option("--window", type=float, default=60.0, show_default=True, help="Seconds analysed.")
@click.option("--env-rate", type=float, default=ENV_RATE, show_default=True)
@click.option("--n-max", type=int, default=8, show_default=True)
@click.option("--freq-tol", type=float, default=0.05, show_default=True,
              help="Absolute frequency matching tolerance in Hz.")
@click.option("--freq-tol-rel", type=float, default=0.03, show_default=True)
@click.option("--tie-tol", type=float, default=0.02, show_default=True)
@click.option("--duty", type=float, default=None, help="Override the preset duty cycle.")
@click.option("--noise", type=float, default=0.1, show_default=True, help="Noise RMS in V.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--demod", type=click.Choice(["synchronous", "square_law"]),
              default="synchronous", show_default=True)
@click.option("--segmentation", type=click.Choice(["common", "per_meter"]),
              default="common", show_default=True)
@click.option("--boundaries", type=click.Path(path_type=Path), default=None,
              help="TOML file with fixed band boundaries per N.")
@click.option("--out", "out_dir", type=click.Path(path_type=Path), default=Path("vfsloc_out"),
              show_default=True)
@click.option("--csv", "emit_csv", is_flag=True, help="Write spectra and time series CSVs.")
@click.option("--plots", "emit_plots", is_flag=True, help="Also render SVG plots (matplotlib).")
def run(case, manifest, grid, meters, window, env_rate, n_max, freq_tol, freq_tol_rel, tie_tol,
        duty, noise, seed, demod, segmentation, boundaries, out_dir, emit_csv, emit_plots):
    """Run the localization pipeline and write report.json and trace.json."""
    try:
        cfg = RunConfig(grid=grid, case=case, manifest=manifest,
                        meters=tuple(m.strip() for m in meters.split(",") if m.strip()),
                        window=window, env_rate=env_rate, n_max=n_max, freq_tol_abs=freq_tol,
                        freq_tol_rel=freq_tol_rel, tie_tol=tie_tol, out_dir=out_dir,
                        emit_plots=emit_plots, emit_csv=emit_csv, duty=duty, noise_rms=noise,
                        seed=seed, demod_method=demod, segmentation=segmentation,
                        boundaries=_parse_boundaries(boundaries))
        report, _ = execute_run(cfg)
    except (VfslocError, ValueError) as exc:
        _fail(exc)
        return
    for s in report.sources:
        click.echo(f"{s.supply_point}\t{s.f_i:.3f} Hz\tA={s.A_i:.3f} V")
    for w in report.warnings:
        click.echo(f"warning: {w}", err=True)


@main.command("synth")
@click.option("--case", "case", default=None, help="Built-in case preset (case1..case5).")
@click.option("--scenario", type=click.Path(path_type=Path), default=None,
              help="TOML scenario with [[sources]] tables.")
@click.option("--grid", default="grid_table1", show_default=True)
@click.option("--duty", type=float, default=None)
@click.option("--noise", type=float, default=0.1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--format", "fmt", type=click.Choice(["f64", "csv"]), default="f64",
              show_default=True)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), default=Path("vfsloc_synth"),
              show_default=True)
def synth_cmd(case, scenario, grid, duty, noise, seed, fmt, out_dir):
    """Write synthetic meter voltages, a metadata file and a manifest."""
    try:
        if (case is None) == (scenario is None):
            raise ConfigInvalid("give exactly one of --case or --scenario")
        g = _grid(grid)
        if case is not None:
            try:
                scen = synth.case_scenario(case, g, duty=duty, noise_rms=noise, seed=seed)
            except KeyError as exc:
                raise ConfigInvalid(str(exc)) from exc
        else:
            scen = scenario_from_toml(scenario, g)
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        signals = synth.synthesize(scen)
        lines = [f'grid = "{grid}"', f"nominal_frequency = {scen.carrier_frequency}", ""]
        for m, s in signals.items():
            name = f"{m}.{fmt}"
            if fmt == "csv":
                write_csv(s, out_dir / name)
            else:
                write_raw(s, out_dir / name)
            lines += ["[[meters]]", f'node = "{m}"', f'path = "{name}"',
                      f"sample_rate = {s.sample_rate}", 'unit = "volt"', ""]
        (out_dir / "manifest.toml").write_text("\n".join(lines))
        _dump_json(scen.metadata(), out_dir / "scenario.json")
    except (VfslocError, ValueError, OSError) as exc:
        _fail(exc)
        return
    click.echo(f"wrote {len(signals)} meter signals to {out_dir}")


@main.command()
@click.argument("signals", nargs=-1)
@click.option("--manifest", type=click.Path(path_type=Path), default=None)
@click.option("-n", "--bands", type=int, default=3, show_default=True)
@click.option("--segmentation", type=click.Choice(["common", "per_meter"]),
              default="common", show_default=True)
@click.option("--env-rate", type=float, default=ENV_RATE, show_default=True)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), default=Path("vfsloc_diag"),
              show_default=True)
def diag(signals, manifest, bands, segmentation, env_rate, out_dir):
    """Spectra, band boundaries and leakage ratios.

    SIGNALS are NODE=PATH pairs; alternatively use --manifest.
    """
    try:
        if manifest is not None:
            sigs, doc = load_manifest(manifest)
            fc = float(doc.get("nominal_frequency", 50.0))
        else:
            if not signals:
                raise ConfigInvalid("give NODE=PATH signals or --manifest")
            sigs = {}
            for item in signals:
                node, sep, path = item.partition("=")
                if not sep:
                    raise ConfigInvalid(f"expected NODE=PATH, got {item!r}")
                sigs[node] = read_signal(Path(path))
            sigs = align(sigs)
            fc = 50.0
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        rows = diagnose(sigs, bands, segmentation, fc, env_rate, out_dir)
    except (VfslocError, ValueError, OSError) as exc:
        _fail(exc)
        return
    n_flag = sum(r[3] for r in rows)
    click.echo(f"{len(rows)} bands analysed, {n_flag} flagged")


def diagnose(signals: Mapping[str, SampledSignal], n_bands: int, segmentation: str,
             fc: float, env_rate: float, out_dir: Path) -> list[tuple[str, int, float, bool]]:
    """Write ``spectrum_<meter>.csv``, ``boundaries.csv`` and ``leakage.csv``."""
    envs = {m: envelope_of(s, fc, env_rate) for m, s in signals.items()}
    spectra = {m: eewt.magnitude_spectrum(e) for m, e in envs.items()}
    if segmentation == "common":
        seg = eewt.segment_spectrum(combined_spectrum(list(spectra.values())), n_bands)
        segs = {m: seg for m in envs}
    else:
        segs = {m: eewt.segment_spectrum(spectra[m], n_bands) for m in envs}
    rows = []
    b_lines = ["meter,index,frequency_hz"]
    for m, env in envs.items():
        comps = eewt.decompose(env, segs[m])
        write_spectrum_csv(out_dir / f"spectrum_{m}.csv", spectra[m], segs[m].boundaries, comps)
        rep = eewt.leakage_diagnostic(comps, segs[m], spectra[m])
        for k, b in enumerate(segs[m].boundaries):
            b_lines.append(f"{m},{k},{b:.6f}")
        for k, (r, f) in enumerate(zip(rep.ratios, rep.flagged)):
            rows.append((m, k, r, f))
    (out_dir / "boundaries.csv").write_text("\n".join(b_lines) + "\n")
    lk = ["meter,band,ratio,flagged"] + [f"{m},{k},{r:.6f},{int(f)}" for m, k, r, f in rows]
    (out_dir / "leakage.csv").write_text("\n".join(lk) + "\n")
    return rows


if __name__ == "__main__":  # pragma: no cover
    main()
