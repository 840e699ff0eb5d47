"""Iterative selective identification and localization.

For ``N = 1, 2, ...`` every meter's envelope is split into ``N`` components,
each component is regularized into a step signal and reduced to ``(f_i, A_i)``,
components with comparable ``f_i`` are grouped across meters and each group is
localized at the meter where its mean change amplitude peaks.  Groups at the
same point whose frequencies are harmonically or mirror related (relation
``f_i = |2 f_c - f_j|`` or ``f_i = n f_j``, ``n <= 5``) are one source.  The
loop stops at the first ``N`` where two distinct sources share a supply point:
points are reported from ``N - 1`` and frequencies from ``N``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import eewt
from .demod import Envelope
from .eewt import LeakageReport, SpectrumSegmentation
from .errors import (
    EmptyChanges,
    InsufficientMeters,
    NoComponentsFound,
    NoDominantPeak,
    NotEnoughPeaks,
)
from .features import ComponentFeatures, extract_features
from .grid import AmplitudeProfile, GridModel, localize
from .signals import SampledSignal

log = logging.getLogger(__name__)

HARMONICS = (1, 2, 3, 4, 5)


@dataclass(frozen=True)
class LocatorConfig:
    n_max: int = 8
    carrier_frequency: float = 50.0
    freq_tol_abs: float = 0.05
    freq_tol_rel: float = 0.03
    eq1_tol_bins: float = 2.0
    tie_tol: float = 0.02
    identification_extra: int = 1
    # "common": one band layout for all meters; "per_meter": each meter its own
    segmentation: str = "common"
    # "band": components are grouped band by band; "frequency": greedy over all
    grouping: str = "band"
    smoothing_width: int | None = None
    theta_rel: float = eewt.THETA_REL
    gamma_cap: float = eewt.GAMMA_CAP
    leakage_threshold: float = eewt.LEAKAGE_THRESHOLD
    # a component counts only if the envelope line at its f_i stands this
    # far above the meter's median spectral level
    line_snr: float = 8.0
    # also merge same-point groups that are lines of one harmonic train
    comb_merge: bool = True
    # injected boundaries per N, bypassing automatic segmentation
    boundaries: Mapping[int, Sequence[float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.n_max < 2:
            raise ValueError("n_max must be at least 2")
        if self.segmentation not in ("common", "per_meter"):
            raise ValueError("segmentation must be 'common' or 'per_meter'")
        if self.grouping not in ("band", "frequency"):
            raise ValueError("grouping must be 'band' or 'frequency'")

    def freq_tol(self, f: float) -> float:
        return max(self.freq_tol_abs, self.freq_tol_rel * abs(f))


@dataclass(frozen=True, eq=False)
class ComponentGroup:
    f_i: float
    members: Mapping[str, ComponentFeatures]
    profile: AmplitudeProfile
    indicated_point: str | None = None
    shape_score: float = float("nan")
    band_index: int | None = None

    @property
    def meters(self) -> tuple[str, ...]:
        return tuple(self.members)

    def located(self, point: str) -> "ComponentGroup":
        return ComponentGroup(self.f_i, self.members, self.profile, point,
                              self.shape_score, self.band_index)


@dataclass(frozen=True, eq=False)
class Source:
    supply_point: str
    f_i: float
    A_i: float
    profile: AmplitudeProfile
    related_frequencies: tuple[float, ...] = ()
    groups: tuple[ComponentGroup, ...] = ()


@dataclass(frozen=True, eq=False)
class IterationResult:
    n: int
    segmentations: Mapping[str, SpectrumSegmentation]
    features: Mapping[str, tuple[ComponentFeatures, ...]]
    groups: tuple[ComponentGroup, ...]
    sources: tuple[Source, ...]
    leakage: Mapping[str, LeakageReport]
    regularized: Mapping[str, tuple] = field(default_factory=dict, repr=False)

    @property
    def indicated_points(self) -> tuple[str, ...]:
        return tuple(s.supply_point for s in self.sources)

    @property
    def has_duplicate(self) -> bool:
        pts = self.indicated_points
        return len(set(pts)) < len(pts)


@dataclass(frozen=True, eq=False)
class IterationTrace:
    iterations: tuple[IterationResult, ...]
    n_stop: int
    stopped: bool  # False when n_max was reached without a shared point
    localization_set: tuple[Source, ...]
    identification_set: tuple[Source, ...]
    identification_n: int
    config: LocatorConfig

    def iteration(self, n: int) -> IterationResult:
        for it in self.iterations:
            if it.n == n:
                return it
        raise KeyError(n)

    @property
    def leakage_flags(self) -> list[tuple[int, str, int, float]]:
        """(N, meter, band, ratio) for every flagged band up to identification."""
        out = []
        for it in self.iterations:
            if it.n > self.identification_n:
                break
            for m, rep in it.leakage.items():
                for b, (r, f) in enumerate(zip(rep.ratios, rep.flagged)):
                    if f:
                        out.append((it.n, m, b, r))
        return out


def eq1_related(f_i: float, f_j: float, f_c: float = 50.0, tol: float = 0.0) -> bool:
    """True when ``f_i`` is the mirror ``|2 f_c - f_j|`` or a multiple
    ``n * f_j`` (``n = 1..5``) of ``f_j``, within ``tol``."""
    if abs(f_i - abs(2 * f_c - f_j)) <= tol:
        return True
    return any(abs(f_i - n * f_j) <= tol for n in HARMONICS)


def _related(a: float, b: float, f_c: float, tol: float) -> bool:
    return eq1_related(a, b, f_c, tol) or eq1_related(b, a, f_c, tol)


def _shape_score(regs: Sequence[SampledSignal]) -> float:
    """Smallest zero-lag normalized cross-correlation between member signals."""
    xs = []
    for r in regs:
        x = r.samples - r.samples.mean()
        nrm = np.linalg.norm(x)
        if nrm > 0:
            xs.append(x / nrm)
    if len(xs) < 2:
        return float("nan")
    n = min(x.size for x in xs)
    return float(min(xs[i][:n] @ xs[j][:n] for i in range(len(xs)) for j in range(i + 1, len(xs))))


def _make_group(members: Mapping[str, ComponentFeatures], band_index=None,
                steps: Mapping[str, SampledSignal] | None = None) -> ComponentGroup:
    f = float(np.median([m.f_i for m in members.values()]))
    profile = AmplitudeProfile({k: m.A_i for k, m in members.items()}, f)
    score = _shape_score([steps[k] for k in members]) if steps else float("nan")
    return ComponentGroup(f, dict(members), profile, None, score, band_index)


def match_components(per_meter: Mapping[str, Sequence[ComponentFeatures]],
                     tol_abs: float = 0.05, tol_rel: float = 0.03) -> list[ComponentGroup]:
    """Group features of different meters that share a fundamental frequency.

    Features are visited in ascending frequency.  Each unassigned feature
    seeds a group; every other meter contributes its closest unassigned
    feature within ``max(tol_abs, tol_rel * f)`` of the seed.  Groups seen by
    fewer than two meters are dropped.
    """
    if len(per_meter) < 2:
        raise InsufficientMeters("matching needs at least two meters")
    pool = sorted(((f.f_i, m, i) for m, fs in per_meter.items() for i, f in enumerate(fs)),
                  key=lambda t: (t[0], t[1], t[2]))
    used = set()
    groups = []
    for f, meter, i in pool:
        if (meter, i) in used:
            continue
        tol = max(tol_abs, tol_rel * f)
        members = {meter: per_meter[meter][i]}
        used.add((meter, i))
        for other, feats in per_meter.items():
            if other == meter:
                continue
            best = None
            for j, g in enumerate(feats):
                if (other, j) in used or abs(g.f_i - f) > tol:
                    continue
                if best is None or abs(g.f_i - f) < abs(feats[best].f_i - f):
                    best = j
            if best is not None:
                members[other] = feats[best]
                used.add((other, best))
        if len(members) >= 2:
            groups.append(_make_group(members))
    return groups


def assess_propagation(group: ComponentGroup, grid: GridModel,
                       tie_tol: float = 0.02) -> ComponentGroup:
    """Locate the group at its amplitude maximum; returns the located group."""
    return group.located(localize(group.profile, grid, tie_tol))


def merge_related(groups: Sequence[ComponentGroup], f_c: float, tol: float,
                  same_train=None) -> list[Source]:
    """Fold same-point groups with related frequencies into single sources.

    Within each supply point the strongest group (largest peak amplitude)
    founds a source; weaker groups related to any member join it.  Besides
    the mirror/harmonic relation, ``same_train(point, f_a, f_b)`` may declare
    two frequencies lines of one harmonic train.
    """
    by_point: dict[str, list[ComponentGroup]] = {}
    for g in groups:
        by_point.setdefault(g.indicated_point, []).append(g)
    sources = []
    for point, gs in by_point.items():
        gs = sorted(gs, key=lambda g: (-max(g.profile.entries.values()), g.f_i))
        clusters: list[list[ComponentGroup]] = []
        for g in gs:
            for cl in clusters:
                if any(_related(g.f_i, h.f_i, f_c, tol)
                       or (same_train is not None and same_train(point, g.f_i, h.f_i))
                       for h in cl):
                    cl.append(g)
                    break
            else:
                clusters.append([g])
        for cl in clusters:
            lead = cl[0]
            sources.append(Source(point, lead.f_i, lead.profile.entries[point], lead.profile,
                                  tuple(sorted(h.f_i for h in cl[1:])), tuple(cl)))
    sources.sort(key=lambda s: (s.f_i, s.supply_point))
    return sources


def combined_spectrum(spectra: Sequence[eewt.Spectrum]) -> eewt.Spectrum:
    """Per-frequency maximum of the meters' spectra, each scaled to its peak.

    A source shows up where it is strongest relative to everything else,
    which is normally at or near its own supply point.
    """
    mags = []
    for s in spectra:
        peak = s.magnitudes.max()
        mags.append(s.magnitudes / peak if peak > 0 else s.magnitudes)
    ref = spectra[0]
    return eewt.Spectrum(ref.frequencies, np.max(mags, axis=0), ref.n_samples, ref.sample_rate)


class _Pipeline:
    """Per-N analysis with spectra cached across iterations."""

    def __init__(self, envelopes: Mapping[str, SampledSignal], grid: GridModel,
                 config: LocatorConfig):
        self.envelopes = envelopes
        self.grid = grid
        self.config = config
        self.spectra = {m: eewt.magnitude_spectrum(e) for m, e in envelopes.items()}
        self.combined = combined_spectrum(list(self.spectra.values()))
        first = next(iter(envelopes.values()))
        self.nyquist = first.sample_rate / 2
        self.eq1_tol = config.eq1_tol_bins * first.sample_rate / len(first)
        self._combs: dict[str, tuple] = {}
        self.floors = {m: float(np.median(sp.magnitudes[1:])) for m, sp in self.spectra.items()}

    def significant(self, meter: str, f: float) -> bool:
        sp = self.spectra[meter]
        k = int(round(f / sp.resolution))
        w = int(np.ceil(self.config.eq1_tol_bins))
        peak = sp.magnitudes[max(k - w, 0):k + w + 1].max(initial=0.0)
        return peak >= self.config.line_snr * self.floors[meter]

    def train_of(self, meter: str, f: float) -> int | None:
        """Fundamental bin of the harmonic train holding the line nearest ``f``."""
        if meter not in self._combs:
            lines, _, owner = eewt.harmonic_combs(self.spectra[meter])
            self._combs[meter] = (lines, owner)
        lines, owner = self._combs[meter]
        if lines.size == 0:
            return None
        k = f / self.spectra[meter].resolution
        i = int(np.argmin(np.abs(lines - k)))
        if abs(lines[i] - k) > self.config.eq1_tol_bins:
            return None
        return owner[int(lines[i])]

    def same_train(self, point: str, f_a: float, f_b: float) -> bool:
        if point not in self.spectra:
            return False
        ta = self.train_of(point, f_a)
        return ta is not None and ta == self.train_of(point, f_b)

    def segment(self, n: int) -> dict[str, SpectrumSegmentation]:
        cfg = self.config
        if n in cfg.boundaries:
            seg = SpectrumSegmentation.from_boundaries(cfg.boundaries[n], self.nyquist)
            if seg.n_bands != n:
                raise ValueError(f"injected boundaries for N={n} define {seg.n_bands} bands")
            return {m: seg for m in self.envelopes}
        if cfg.segmentation == "common":
            seg = eewt.segment_spectrum(self.combined, n, cfg.smoothing_width)
            return {m: seg for m in self.envelopes}
        return {m: eewt.segment_spectrum(self.spectra[m], n, cfg.smoothing_width)
                for m in self.envelopes}

    def run(self, n: int) -> IterationResult:
        cfg = self.config
        segs = self.segment(n)
        feats: dict[str, tuple[ComponentFeatures, ...]] = {}
        regs: dict[str, tuple] = {}
        leak: dict[str, LeakageReport] = {}
        for m, env in self.envelopes.items():
            comps = eewt.decompose(env, segs[m], cfg.gamma_cap)
            leak[m] = eewt.leakage_diagnostic(comps, segs[m], self.spectra[m],
                                              cfg.leakage_threshold)
            fs, rs = [], []
            for c in comps:
                r = eewt.regularize(c, theta_rel=cfg.theta_rel)
                rs.append(r)
                try:
                    feat = extract_features(r, m)
                except (EmptyChanges, NoDominantPeak):
                    continue
                if self.significant(m, feat.f_i):
                    fs.append(feat)
            feats[m] = tuple(fs)
            regs[m] = tuple(rs)
        groups = self.group(feats, regs)
        located = [assess_propagation(g, self.grid, cfg.tie_tol) for g in groups]
        sources = merge_related(located, cfg.carrier_frequency, self.eq1_tol,
                                self.same_train if cfg.comb_merge else None)
        return IterationResult(n, segs, feats, tuple(located), tuple(sources), leak, regs)

    def group(self, feats, regs) -> list[ComponentGroup]:
        cfg = self.config
        steps = {m: {r.band_index: r.step_signal for r in rs} for m, rs in regs.items()}
        if cfg.grouping == "frequency":
            groups = match_components(feats, cfg.freq_tol_abs, cfg.freq_tol_rel)
            out = []
            for g in groups:
                st = {m: steps[m][f.band_index] for m, f in g.members.items()}
                out.append(_make_group(g.members, None, st))
            return out
        bands = sorted({f.band_index for fs in feats.values() for f in fs})
        out = []
        for b in bands:
            per = {m: [f for f in fs if f.band_index == b] for m, fs in feats.items()}
            per = {m: v for m, v in per.items() if v}
            if len(per) < 2:
                continue
            cand = match_components(per, cfg.freq_tol_abs, cfg.freq_tol_rel)
            if not cand:
                continue
            # the band's component is the frequency most meters agree on
            best = max(cand, key=lambda g: (len(g.members), max(g.profile.entries.values())))
            st = {m: steps[m][b] for m in best.members}
            out.append(_make_group(best.members, b, st))
        return out


def run_iterative(envelopes: Mapping[str, SampledSignal], grid: GridModel,
                  config: LocatorConfig | None = None) -> IterationTrace:
    """Run the N loop on time-aligned envelopes keyed by meter node."""
    cfg = LocatorConfig() if config is None else config
    if len(envelopes) < 2:
        raise InsufficientMeters("at least two meters are required")
    lengths = {len(e) for e in envelopes.values()}
    rates = {e.sample_rate for e in envelopes.values()}
    if len(lengths) != 1 or len(rates) != 1:
        raise ValueError("envelopes must share sample rate and length")
    for m in envelopes:
        grid.check_node(m)
    pipe = _Pipeline(envelopes, grid, cfg)

    iterations: list[IterationResult] = []
    n_stop, stopped = cfg.n_max, False
    for n in range(1, cfg.n_max + 1):
        try:
            it = pipe.run(n)
        except NotEnoughPeaks as exc:
            log.info("N=%d: %s", n, exc)
            n_stop = max(1, n - 1)
            break
        iterations.append(it)
        log.debug("N=%d sources=%s", n, [(round(s.f_i, 3), s.supply_point) for s in it.sources])
        if n >= 2 and it.has_duplicate:
            n_stop, stopped = n, True
            break
    if not iterations or not any(it.sources for it in iterations):
        raise NoComponentsFound("no component was seen by two or more meters")
    n_stop = min(n_stop, iterations[-1].n)
    by_n = {it.n: it for it in iterations}
    loc = by_n.get(n_stop - 1, by_n[n_stop])
    ident_n = n_stop
    ident = by_n[n_stop]

    # identification may use later iterations while they only refine it
    if stopped:
        for extra in range(1, cfg.identification_extra + 1):
            n = n_stop + extra
            if n > cfg.n_max:
                break
            try:
                nxt = pipe.run(n)
            except NotEnoughPeaks:
                break
            iterations.append(nxt)
            if _refines(ident, nxt, pipe.eq1_tol, cfg):
                ident, ident_n = nxt, n
            else:
                break
    return IterationTrace(tuple(iterations), n_stop, stopped, loc.sources, ident.sources,
                          ident_n, cfg)


def _refines(prev: IterationResult, nxt: IterationResult, tol: float,
             cfg: LocatorConfig) -> bool:
    """A later iteration is usable for identification when no same-point pair
    in it is related and every earlier source reappears at its point."""
    gs = nxt.groups
    for i, a in enumerate(gs):
        for b in gs[i + 1:]:
            if a.indicated_point == b.indicated_point and \
                    _related(a.f_i, b.f_i, cfg.carrier_frequency, tol):
                return False
    for s in prev.sources:
        if not any(t.supply_point == s.supply_point and abs(t.f_i - s.f_i) <= cfg.freq_tol(s.f_i)
                   for t in nxt.sources):
            return False
    return True


@dataclass(frozen=True)
class ReportedSource:
    supply_point: str
    f_i: float
    A_i: float
    profile: Mapping[str, float]
    related_frequencies: tuple[float, ...] = ()


@dataclass(frozen=True)
class SourceReport:
    sources: tuple[ReportedSource, ...]
    warnings: tuple[str, ...] = ()
    n_stop: int = 0
    identification_n: int = 0

    def to_dict(self) -> dict:
        return {
            "n_stop": self.n_stop,
            "identification_iteration": self.identification_n,
            "sources": [
                {"supply_point": s.supply_point, "f_hz": round(s.f_i, 4),
                 "mean_amplitude_v": round(s.A_i, 4),
                 "profile_v": {k: round(v, 4) for k, v in sorted(s.profile.items())},
                 "related_frequencies_hz": [round(f, 4) for f in s.related_frequencies]}
                for s in self.sources
            ],
            "warnings": list(self.warnings),
        }


def build_report(trace: IterationTrace | None) -> SourceReport:
    """One entry per identified source, with leakage and consistency warnings."""
    if trace is None or not trace.identification_set:
        return SourceReport(())
    sources = tuple(ReportedSource(s.supply_point, s.f_i, s.A_i, dict(s.profile.entries),
                                   s.related_frequencies)
                    for s in trace.identification_set)
    warnings = []
    flagged = [f for f in trace.leakage_flags if f[0] == trace.identification_n]
    if flagged:
        worst = sorted(flagged, key=lambda t: (-t[3], t[1], t[2]))[:3]
        detail = ", ".join(f"{m} band {b} ({r:.2f})" for _, m, b, r in worst)
        warnings.append(
            "spectral overlap: components are not separated into independent "
            f"source signals; {len(flagged)} band(s) with leakage above "
            f"{trace.config.leakage_threshold:.2f}, worst {detail}")
    loc_points = {s.supply_point for s in trace.localization_set}
    odd = sorted({s.supply_point for s in sources} - loc_points)
    if odd and trace.identification_n != trace.n_stop - 1:
        warnings.append(
            "supply point(s) " + ", ".join(odd) + f" appear only at N={trace.identification_n}, "
            f"not in the localization iteration N={trace.n_stop - 1}")
    if not trace.stopped:
        warnings.append(f"no shared supply point up to N={trace.config.n_max}; "
                        "the source count may be underestimated")
    ident = trace.iteration(trace.identification_n)
    for g in ident.groups:
        if np.isfinite(g.shape_score) and g.shape_score < 0.95:
            warnings.append(f"component at {g.f_i:.3f} Hz has dissimilar shapes across meters "
                            f"(correlation {g.shape_score:.2f})")
    return SourceReport(sources, tuple(warnings), trace.n_stop, trace.identification_n)


def locate_sources(envelopes: Mapping[str, Envelope], grid: GridModel,
                   config: LocatorConfig | None = None) -> tuple[SourceReport, IterationTrace]:
    trace = run_iterative(envelopes, grid, config)
    return build_report(trace), trace
