"""Corpus-level statistics over per-sample analyses.

Everything here is a pure function of a list of ``SampleAnalysis`` records.
Results are ordered by family name (then year) so reports are stable
regardless of input order.
"""

from __future__ import annotations

import json
import math
import statistics
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from importlib import resources
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple, Union

from .errors import ConfigError, EmptyCorpus, SubsetBudgetExceeded
from .sample_analysis import SampleAnalysis
from .signature_engine import SignatureCatalog, access_split

GROUP_ORDER = ("Internet", "Registry", "FileSystem", "Security")
SUBSET_LIMIT = 20


def _hist(values) -> Dict[int, int]:
    return dict(sorted(Counter(values).items()))


def _mean(values) -> Optional[float]:
    values = list(values)
    return sum(values) / len(values) if values else None


def _family(a: SampleAnalysis) -> str:
    return a.meta.family if a.meta else ""


def _by_family(analyses) -> Dict[str, List[SampleAnalysis]]:
    out = defaultdict(list)
    for a in analyses:
        out[_family(a)].append(a)
    return dict(sorted(out.items()))


def _multi(analyses) -> List[SampleAnalysis]:
    return [a for a in analyses if a.is_multi_process]


def target_pids(a: SampleAnalysis) -> List[int]:
    """Distinct non-initial injection targets, in first-injection order."""
    seen = []
    for inj in a.injections:
        if inj.target_pid != a.spg.entry.pid and inj.target_pid not in seen:
            seen.append(inj.target_pid)
    return seen


def target_names(a: SampleAnalysis) -> FrozenSet[str]:
    names = {p.pid: p.image_name for p in a.per_process}
    return frozenset(names[p] for p in target_pids(a) if p in names)


# -- distributions -----------------------------------------------------------

@dataclass(frozen=True)
class Distributions:
    samples: int
    process_count: Dict[int, int]
    process_depth: Dict[int, int]
    width: Dict[int, int]
    wave_count: Dict[int, int]
    multi_process_count: int
    multi_process_rate: float


def corpus_distributions(analyses: Sequence[SampleAnalysis]) -> Distributions:
    if not analyses:
        raise EmptyCorpus()
    ms = [a.metrics for a in analyses]
    multi = sum(1 for m in ms if m.process_count > 1)
    return Distributions(
        samples=len(ms),
        process_count=_hist(m.process_count for m in ms),
        process_depth=_hist(m.process_depth for m in ms),
        width=_hist(m.width for m in ms),
        wave_count=_hist(m.wave_count for m in ms),
        multi_process_count=multi,
        multi_process_rate=multi / len(ms),
    )


WAVE_BUCKETS = [(1, 1), (2, 2), (3, 3), (4, 4), (5, 5), (6, 6), (7, 7), (8, 8), (9, 9), (10, 10),
                (11, 15), (16, 25), (26, None)]


def bucket_label(lo, hi) -> str:
    if hi is None:
        return f">{lo - 1}"
    return str(lo) if lo == hi else f"{lo}-{hi}"


def bucketed_waves(hist: Mapping[int, int]) -> Dict[str, int]:
    """Collapse a wave-count histogram into the bucket layout used for samples."""
    out = {}
    for lo, hi in WAVE_BUCKETS:
        out[bucket_label(lo, hi)] = sum(n for k, n in hist.items() if k >= lo and (hi is None or k <= hi))
    return out


# -- activity in initial vs later processes ----------------------------------

@dataclass(frozen=True)
class WaveSplit:
    initial_histogram: Dict[int, int]
    non_initial_histogram: Dict[int, int]
    initial_mean: Optional[float]
    non_initial_mean: Optional[float]


def wave_split(analyses: Sequence[SampleAnalysis]) -> WaveSplit:
    """Wave counts of initial vs non-initial processes in multi-process samples."""
    multi = _multi(analyses)
    init = [a.initial.wave_count for a in multi]
    rest = [p.wave_count for a in multi for p in a.non_initial]
    return WaveSplit(_hist(init), _hist(rest), _mean(init), _mean(rest))


@dataclass(frozen=True)
class InstructionSplit:
    initial_mean: Optional[float]
    non_initial_mean: Optional[float]


def instruction_split(analyses: Sequence[SampleAnalysis]) -> InstructionSplit:
    multi = _multi(analyses)
    return InstructionSplit(
        _mean(a.initial.unique_instructions for a in multi),
        _mean(p.unique_instructions for a in multi for p in a.non_initial),
    )


class SensitiveApiGroups:
    """Group name -> API names.  Groups must not overlap."""

    def __init__(self, groups: Mapping[str, Sequence[str]]):
        self.groups: Dict[str, FrozenSet[str]] = {g: frozenset(v) for g, v in groups.items()}
        seen: Dict[str, str] = {}
        for g, members in self.groups.items():
            for api in members:
                if api in seen:
                    raise ConfigError(f"{api} is listed in both {seen[api]} and {g}")
                seen[api] = g

    def names(self) -> List[str]:
        known = [g for g in GROUP_ORDER if g in self.groups]
        return known + sorted(g for g in self.groups if g not in GROUP_ORDER)

    def items(self):
        return [(g, self.groups[g]) for g in self.names()]


def load_groups(raw: Union[bytes, str]) -> SensitiveApiGroups:
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"sensitive groups file is not valid JSON: {exc}") from None
    if not isinstance(data, dict) or not all(isinstance(v, list) for v in data.values()):
        raise ConfigError("sensitive groups file must map group names to API lists")
    return SensitiveApiGroups(data)


def load_default_groups() -> SensitiveApiGroups:
    return load_groups(resources.files("spgkit").joinpath("data/sensitive_groups.json").read_bytes())


@dataclass(frozen=True)
class SensitiveRow:
    family: str
    samples: int
    # group -> (samples using it in the initial process, samples using it later)
    counts: Dict[str, Tuple[int, int]]


@dataclass(frozen=True)
class SensitiveTable:
    rows: Tuple[SensitiveRow, ...]
    total: SensitiveRow
    # group -> (mean unique functions per initial process, per non-initial process)
    per_process_avg: Dict[str, Tuple[Optional[float], Optional[float]]]
    # api name -> (initial processes calling it, non-initial processes calling it)
    process_counts: Dict[str, Tuple[int, int]] = field(default_factory=dict)


def sensitive_api_table(analyses: Sequence[SampleAnalysis], groups: SensitiveApiGroups) -> SensitiveTable:
    multi = _multi(analyses)
    gitems = groups.items()
    rows = []
    total = {g: [0, 0] for g, _ in gitems}
    for fam, members in _by_family(multi).items():
        counts = {}
        for g, apis in gitems:
            init = sum(1 for a in members if a.initial.api_names & apis)
            later = sum(1 for a in members if any(p.api_names & apis for p in a.non_initial))
            counts[g] = (init, later)
            total[g][0] += init
            total[g][1] += later
        rows.append(SensitiveRow(fam, len(members), counts))
    avg = {}
    for g, apis in gitems:
        avg[g] = (_mean(len(a.initial.api_names & apis) for a in multi),
                  _mean(len(p.api_names & apis) for a in multi for p in a.non_initial))
    every = frozenset().union(*(apis for _, apis in gitems)) if gitems else frozenset()
    init_api = Counter(n for a in multi for n in a.initial.api_names & every)
    later_api = Counter(n for a in multi for p in a.non_initial for n in p.api_names & every)
    per_api = {n: (init_api[n], later_api[n]) for n in sorted(set(init_api) | set(later_api))}
    return SensitiveTable(tuple(rows), SensitiveRow("Total", len(multi), {g: tuple(v) for g, v in total.items()}),
                          avg, per_api)


# -- per-family consistency --------------------------------------------------

@dataclass(frozen=True)
class FamilyStats:
    family: str
    S: int
    M: int
    stability: float
    m_ratio: Optional[float]
    sigma: Optional[int]
    sigma_eq: Optional[int]
    s_eq: int
    seq_ratio: Optional[float]
    family_consistency: float


def family_stats(analyses: Sequence[SampleAnalysis]) -> List[FamilyStats]:
    out = []
    for fam, members in _by_family(analyses).items():
        S = len(members)
        multi = _multi(members)
        M = len(multi)
        if M:
            sets = Counter(a.signature_set for a in multi)
            sigma = len(frozenset().union(*sets))
            sigma_eq = max(sets.values())
            s_eq = max(sigma_eq, S - M)
            out.append(FamilyStats(fam, S, M, max(M, S - M) / S, M / S, sigma, sigma_eq, s_eq,
                                   sigma_eq / M, s_eq / S))
        else:
            out.append(FamilyStats(fam, S, 0, 1.0, None, None, None, S, None, 1.0))
    return out


def family_averages(stats: Sequence[FamilyStats]) -> Dict[str, Optional[float]]:
    """Column means; columns that are undefined for a family skip that family."""
    cols = ("S", "M", "stability", "m_ratio", "sigma", "sigma_eq", "s_eq", "seq_ratio", "family_consistency")
    return {c: _mean(getattr(s, c) for s in stats if getattr(s, c) is not None) for c in cols}


@dataclass(frozen=True)
class TargetIntersectionStats:
    family: str
    M: int
    I: int
    shared: Tuple[str, ...]
    I_prime: int
    T: int
    i_over_m: float
    iprime_over_t: float


def largest_intersection(target_sets: Sequence[FrozenSet[str]]) -> Tuple[int, FrozenSet[str]]:
    """Group of samples whose shared target set maximizes shared*size.

    Ties prefer more shared names, then the lexicographically smallest set.
    Only intersections of input sets can be optimal, so those are the
    candidates; each is scored by how many samples contain it.
    """
    cands = set()
    for t in target_sets:
        if not t:
            continue
        cands |= {c & t for c in cands if c & t}
        cands.add(t)
    best = None
    for c in cands:
        size = sum(1 for t in target_sets if c <= t)
        key = (len(c) * size, len(c), tuple(sorted(c)))
        if best is None or key[:2] > best[0][:2] or (key[:2] == best[0][:2] and key[2] < best[0][2]):
            best = (key, size, c)
    if best is None:
        return 0, frozenset()
    return best[1], best[2]


def target_intersection_stats(analyses: Sequence[SampleAnalysis], limit: int = SUBSET_LIMIT) -> List[TargetIntersectionStats]:
    out = []
    for fam, members in _by_family(_multi(analyses)).items():
        M = len(members)
        if M > limit:
            raise SubsetBudgetExceeded(fam, M, limit)
        sets = [target_names(a) for a in members]
        size, shared = largest_intersection(sets)
        T = sum(len(s) for s in sets)
        ip = size * len(shared)
        out.append(TargetIntersectionStats(fam, M, size, tuple(sorted(shared)), ip, T,
                                           size / M, ip / T if T else 0.0))
    return out


# -- propagation counts ------------------------------------------------------

@dataclass(frozen=True)
class DropperStats:
    dropper_propagations: int
    propagations: int
    non_dropper: int
    # family -> (multi-process samples, samples with a dropper propagation)
    per_family: Dict[str, Tuple[int, int]]


def dropper_stats(analyses: Sequence[SampleAnalysis]) -> DropperStats:
    """Propagations are counted per distinct non-initial target process."""
    total = dropped = 0
    per_family = {}
    for fam, members in _by_family(_multi(analyses)).items():
        md = 0
        for a in members:
            targets = set(target_pids(a))
            via = {i.target_pid for i in a.injections if i.via_dropped_file and i.target_pid in targets}
            total += len(targets)
            dropped += len(via)
            md += bool(via)
        if md:
            per_family[fam] = (len(members), md)
    return DropperStats(dropped, total, total - dropped, per_family)


def injections_total(analyses: Sequence[SampleAnalysis]) -> int:
    return sum(len(a.injections) for a in analyses)


def corpus_access_split(analyses: Sequence[SampleAnalysis], catalog: SignatureCatalog) -> Tuple[int, int, int]:
    return access_split([i for a in analyses for i in a.injections], catalog)


@dataclass(frozen=True)
class SignatureUsage:
    signature_id: int
    injections: int
    samples: int
    families: int


def signature_usage(analyses: Sequence[SampleAnalysis]) -> List[SignatureUsage]:
    inj, samples, fams = Counter(), defaultdict(set), defaultdict(set)
    for idx, a in enumerate(analyses):
        for i in a.injections:
            if i.signature_id is None:
                continue
            inj[i.signature_id] += 1
            samples[i.signature_id].add(idx)
            fams[i.signature_id].add(_family(a))
    rows = [SignatureUsage(s, n, len(samples[s]), len(fams[s])) for s, n in inj.items()]
    return sorted(rows, key=lambda r: (-r.injections, r.signature_id))


def family_signature_usage(analyses: Sequence[SampleAnalysis]) -> Dict[str, List[Tuple[int, int, int]]]:
    """family -> [(signature id, injections, samples)] sorted by id."""
    out = {}
    for fam, members in _by_family(analyses).items():
        inj, samples = Counter(), Counter()
        for a in members:
            for s in a.signature_set:
                samples[s] += 1
            for i in a.injections:
                if i.signature_id is not None:
                    inj[i.signature_id] += 1
        if inj:
            out[fam] = [(s, inj[s], samples[s]) for s in sorted(inj)]
    return out


def target_name_counts(analyses: Sequence[SampleAnalysis]) -> Dict[str, int]:
    """Target image name -> number of target processes with that name."""
    c = Counter()
    for a in analyses:
        names = {p.pid: p.image_name for p in a.per_process}
        c.update(names[pid] for pid in target_pids(a))
    return dict(sorted(c.items(), key=lambda kv: (-kv[1], kv[0])))


def family_metric_table(analyses: Sequence[SampleAnalysis], attr: str) -> Dict[str, Dict[int, int]]:
    """family -> histogram of one SpgMetrics field."""
    return {fam: _hist(getattr(a.metrics, attr) for a in members)
            for fam, members in _by_family(analyses).items()}


@dataclass(frozen=True)
class FamilyWaves:
    family: str
    mean: float
    std: float

    @property
    def error_bar(self) -> float:
        return self.std / 2


def family_wave_stats(analyses: Sequence[SampleAnalysis]) -> List[FamilyWaves]:
    out = []
    for fam, members in _by_family(analyses).items():
        waves = [a.metrics.wave_count for a in members]
        out.append(FamilyWaves(fam, statistics.fmean(waves), statistics.pstdev(waves)))
    return out


# -- evolution ----------------------------------------------------------------

@dataclass(frozen=True)
class YearStats:
    year: int
    samples: int
    mean_processes: float
    std: float
    std_sample: Optional[float]
    signatures: int
    first_used: int
    families: int


def evolution_stats(analyses: Sequence[SampleAnalysis]) -> List[YearStats]:
    """Per-year process counts and signature usage; undated samples are skipped."""
    by_year = defaultdict(list)
    for a in analyses:
        if a.meta is not None and a.meta.first_seen_year is not None:
            by_year[a.meta.first_seen_year].append(a)
    first_use: Dict[int, int] = {}
    for year in sorted(by_year):
        for a in by_year[year]:
            for s in a.signature_set:
                first_use.setdefault(s, year)
    firsts = Counter(first_use.values())
    out = []
    for year in sorted(by_year):
        members = by_year[year]
        pcs = [a.metrics.process_count for a in members]
        sigs = frozenset().union(*(a.signature_set for a in members))
        out.append(YearStats(
            year=year,
            samples=len(members),
            mean_processes=statistics.fmean(pcs),
            std=statistics.pstdev(pcs),
            std_sample=statistics.stdev(pcs) if len(pcs) > 1 else None,
            signatures=len(sigs),
            first_used=firsts.get(year, 0),
            families=len({_family(a) for a in members}),
        ))
    return out


# -- the whole report ---------------------------------------------------------

@dataclass(frozen=True)
class CorpusReport:
    distributions: Distributions
    waves: WaveSplit
    instructions: InstructionSplit
    injections_total: int
    access_split: Tuple[int, int, int]
    droppers: DropperStats
    sensitive: SensitiveTable
    families: Tuple[FamilyStats, ...]
    family_averages: Dict[str, Optional[float]]
    intersections: Tuple[TargetIntersectionStats, ...]
    years: Tuple[YearStats, ...]
    signature_usage: Tuple[SignatureUsage, ...]
    family_signatures: Dict[str, List[Tuple[int, int, int]]]
    target_names: Dict[str, int]
    family_depths: Dict[str, Dict[int, int]]
    family_widths: Dict[str, Dict[int, int]]
    family_waves: Tuple[FamilyWaves, ...]


def build_report(analyses: Sequence[SampleAnalysis], catalog: SignatureCatalog,
                 groups: SensitiveApiGroups) -> CorpusReport:
    if not analyses:
        raise EmptyCorpus()
    fams = family_stats(analyses)
    return CorpusReport(
        distributions=corpus_distributions(analyses),
        waves=wave_split(analyses),
        instructions=instruction_split(analyses),
        injections_total=injections_total(analyses),
        access_split=corpus_access_split(analyses, catalog),
        droppers=dropper_stats(analyses),
        sensitive=sensitive_api_table(analyses, groups),
        families=tuple(fams),
        family_averages=family_averages(fams),
        intersections=tuple(target_intersection_stats(analyses)),
        years=tuple(evolution_stats(analyses)),
        signature_usage=tuple(signature_usage(analyses)),
        family_signatures=family_signature_usage(analyses),
        target_names=target_name_counts(analyses),
        family_depths=family_metric_table(analyses, "process_depth"),
        family_widths=family_metric_table(analyses, "width"),
        family_waves=tuple(family_wave_stats(analyses)),
    )


def round_or_none(x, nd=6):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return None
    return round(x, nd)
