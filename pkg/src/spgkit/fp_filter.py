"""Over-tainting filter for propagations that match no signature.

A target process whose tainted calls almost all (strictly more than the
threshold) appear in the pre-infection baseline of its image is treated as
benign code marked by taint imprecision and is dropped together with
everything reachable only through it.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, FrozenSet, Iterable, Mapping, Tuple, Union

from .errors import ConfigError, UnknownImage
from .sample_analysis import SampleAnalysis
from .spg_builder import metrics
from .trace_model import ExecutionTrace

DEFAULT_OVERLAP_THRESHOLD = 0.99


class Verdict(str, Enum):
    FALSE_POSITIVE = "FalsePositive"
    TRUE_POSITIVE = "TruePositive"


class Reason(str, Enum):
    NO_TAINTED_API_CALLS = "NoTaintedApiCalls"
    HIGH_OVERLAP = "HighOverlap"
    LOW_OVERLAP = "LowOverlap"


@dataclass(frozen=True)
class FpVerdict:
    target_pid: int
    verdict: Verdict
    overlap_ratio: float
    reason: Reason

    def to_dict(self):
        return {"target_pid": self.target_pid, "verdict": self.verdict.value,
                "overlap_ratio": self.overlap_ratio, "reason": self.reason.value}


class BaselineProfile:
    """Image name (case-insensitive) -> API names present before infection."""

    def __init__(self, entries: Mapping[str, Iterable[str]]):
        self._apis: Dict[str, FrozenSet[str]] = {}
        for image, apis in entries.items():
            apis = frozenset(apis)
            if not apis:
                raise ConfigError(f"baseline entry for {image!r} is empty")
            self._apis[image.lower()] = apis

    def apis_for(self, image_name: str) -> FrozenSet[str]:
        try:
            return self._apis[image_name.lower()]
        except KeyError:
            raise UnknownImage(image_name) from None

    def __len__(self):
        return len(self._apis)


def load_baseline(raw: Union[bytes, str]) -> BaselineProfile:
    text = raw.decode("utf-8") if isinstance(raw, (bytes, bytearray)) else raw
    entries: Dict[str, set] = {}
    for line_no, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            name, apis = rec["image_name"], rec["apis"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ConfigError(f"baseline line {line_no}: {exc}") from None
        if not isinstance(apis, list):
            raise ConfigError(f"baseline line {line_no}: apis must be a list")
        if not apis:
            raise ConfigError(f"baseline line {line_no}: empty api list for {name!r}")
        entries.setdefault(name, set()).update(apis)
    return BaselineProfile(entries)


def _judge(pid: int, image_name: str, counts: Mapping[str, int], baseline: BaselineProfile,
           threshold: float) -> FpVerdict:
    known = baseline.apis_for(image_name)
    total = sum(counts.values())
    if total == 0:
        return FpVerdict(pid, Verdict.FALSE_POSITIVE, 0.0, Reason.NO_TAINTED_API_CALLS)
    covered = sum(n for name, n in counts.items() if name in known)
    ratio = covered / total
    # compare on integers so 99/100 is not nudged across 0.99 by float error
    if covered * 10**6 > round(threshold * 10**6) * total:
        return FpVerdict(pid, Verdict.FALSE_POSITIVE, ratio, Reason.HIGH_OVERLAP)
    return FpVerdict(pid, Verdict.TRUE_POSITIVE, ratio, Reason.LOW_OVERLAP)


def judge_process(trace: ExecutionTrace, target_pid: int, baseline: BaselineProfile,
                  threshold: float = DEFAULT_OVERLAP_THRESHOLD) -> FpVerdict:
    image = trace.processes[target_pid].image_name
    counts = Counter(c.api_name for _, c in trace.api_calls(target_pid))
    return _judge(target_pid, image, counts, baseline, threshold)


def _candidates(a: SampleAnalysis) -> Tuple[int, ...]:
    """Non-initial targets where no surviving propagation matched a signature."""
    matched, targets = set(), set()
    for inj in a.injections:
        targets.add(inj.target_pid)
        if inj.signature_id is not None:
            matched.add(inj.target_pid)
    return tuple(sorted(targets - matched - {a.spg.entry.pid}))


def _drop(a: SampleAnalysis, fp_pids) -> SampleAnalysis:
    g = a.spg.restricted(n.ref for n in a.spg.nodes if n.pid not in fp_pids)
    g = g.restricted(g.reachable())
    alive = set(g.pids)
    removed = sorted(set(a.removed_pids) | ({p.pid for p in a.per_process} - alive))
    return replace(
        a,
        spg=g,
        metrics=metrics(g, a.budget),
        injections=tuple(i for i in a.injections if i.source_pid in alive and i.target_pid in alive),
        per_process=tuple(p for p in a.per_process if p.pid in alive),
        removed_pids=tuple(removed),
    )


def filter_analysis(a: SampleAnalysis, baseline: BaselineProfile,
                    threshold: float = DEFAULT_OVERLAP_THRESHOLD) -> SampleAnalysis:
    """Remove false-positive targets and re-derive metrics; repeats to a fixpoint."""
    if not _candidates(a):
        return a
    verdicts = {v.target_pid: v for v in a.fp_verdicts}
    cur = a
    while True:
        procs = {p.pid: p for p in cur.per_process}
        fresh = {}
        for pid in _candidates(cur):
            p = procs[pid]
            fresh[pid] = _judge(pid, p.image_name, dict(p.api_counts), baseline, threshold)
        verdicts.update(fresh)
        fp = {pid for pid, v in fresh.items() if v.verdict is Verdict.FALSE_POSITIVE}
        if not fp:
            break
        cur = _drop(cur, fp)
    out = replace(cur, fp_verdicts=tuple(verdicts[k] for k in sorted(verdicts)))
    return a if out == a else out
