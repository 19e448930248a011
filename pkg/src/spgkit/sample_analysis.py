"""Per-sample analysis record and the trace -> record step."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Mapping, Optional, Tuple

from .signature_engine import InjectionEvent, SignatureCatalog, extract_injections, load_default_catalog
from .spg_builder import DEFAULT_PATH_BUDGET, Spg, SpgMetrics, build_spg, metrics
from .trace_model import ExecutionTrace, SampleMeta


@dataclass(frozen=True)
class ProcessStats:
    pid: int
    image_name: str
    is_initial: bool
    wave_count: int
    unique_instructions: int
    # multiset of tainted API names, sorted by name
    api_counts: Tuple[Tuple[str, int], ...] = ()

    @property
    def api_names(self) -> FrozenSet[str]:
        return frozenset(n for n, _ in self.api_counts)

    def sensitive_api_usage(self, groups: Mapping[str, FrozenSet[str]]) -> Dict[str, FrozenSet[str]]:
        names = self.api_names
        return {g: frozenset(names & members) for g, members in groups.items()}


@dataclass(frozen=True)
class SampleAnalysis:
    meta: Optional[SampleMeta]
    spg: Spg
    metrics: SpgMetrics
    injections: Tuple[InjectionEvent, ...]
    per_process: Tuple[ProcessStats, ...]
    fp_verdicts: tuple = ()
    removed_pids: Tuple[int, ...] = ()
    budget: int = field(default=DEFAULT_PATH_BUDGET, compare=False)

    @property
    def signature_set(self) -> FrozenSet[int]:
        return frozenset(i.signature_id for i in self.injections if i.signature_id is not None)

    @property
    def initial(self) -> ProcessStats:
        return next(p for p in self.per_process if p.is_initial)

    @property
    def non_initial(self) -> Tuple[ProcessStats, ...]:
        return tuple(p for p in self.per_process if not p.is_initial)

    @property
    def is_multi_process(self) -> bool:
        return self.metrics.process_count > 1

    def to_dict(self) -> dict:
        m = self.metrics
        return {
            "sample_id": self.meta.sample_id if self.meta else None,
            "family": self.meta.family if self.meta else None,
            "first_seen_year": self.meta.first_seen_year if self.meta else None,
            "metrics": {"PD": m.process_depth, "WD": m.wave_depth, "width": m.width,
                        "process_count": m.process_count, "wave_count": m.wave_count},
            "injections": [
                {"source_pid": i.source_pid, "target_pid": i.target_pid, "signature_id": i.signature_id,
                 "matched_call_seqs": list(i.matched_call_seqs), "via_dropped_file": i.via_dropped_file}
                for i in self.injections
            ],
            "processes": [
                {"pid": p.pid, "image_name": p.image_name, "is_initial": p.is_initial,
                 "wave_count": p.wave_count, "unique_instructions": p.unique_instructions}
                for p in self.per_process
            ],
            "signature_set": sorted(self.signature_set),
            "fp_verdicts": [v.to_dict() for v in self.fp_verdicts],
            "removed_pids": list(self.removed_pids),
        }


def process_stats(trace: ExecutionTrace, spg: Spg) -> Tuple[ProcessStats, ...]:
    waves = Counter(n.pid for n in spg.nodes)
    instr = Counter()
    for ref, count in trace.instruction_counts.items():
        instr[ref.pid] += count
    out = []
    for pid, info in trace.processes.items():
        if pid not in waves:
            continue
        calls = Counter(c.api_name for _, c in trace.api_calls(pid))
        out.append(ProcessStats(pid, info.image_name, pid == spg.entry.pid, waves[pid],
                                instr[pid], tuple(sorted(calls.items()))))
    return tuple(out)


def analyze_trace(trace: ExecutionTrace, meta: Optional[SampleMeta] = None,
                  catalog: Optional[SignatureCatalog] = None,
                  budget: int = DEFAULT_PATH_BUDGET) -> SampleAnalysis:
    """Build the graph, metrics, injections and per-process stats for one trace."""
    catalog = catalog or load_default_catalog()
    g = build_spg(trace)
    return SampleAnalysis(
        meta=meta,
        spg=g,
        metrics=metrics(g, budget),
        injections=tuple(extract_injections(trace, g, catalog)),
        per_process=process_stats(trace, g),
        budget=budget,
    )
