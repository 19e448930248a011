"""Propagation signature catalog and matching.

A signature is an ordered list of API names.  A propagation matches when
the signature occurs as a (not necessarily contiguous) subsequence of the
source process's tainted calls.  The longest matching signature wins and
ties go to the lowest id.
"""

from __future__ import annotations

import json
import ntpath
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

from .errors import CatalogError, DuplicateId, EmptySequence
from .spg_builder import EdgeKind, Spg
from .trace_model import ApiCall, ExecutionTrace


class AccessClass(str, Enum):
    OPEN_EXISTING = "OpenExisting"
    LAUNCH_NEW = "LaunchNew"
    SHELL_LAUNCH = "ShellLaunch"
    OTHER = "Other"


_OPEN_APIS = {"OpenProcess", "ZwOpenProcess", "GetShellWindow"}


def derive_access_class(apis: Iterable[str]) -> AccessClass:
    """Classify by how the target is reached; rules checked in order."""
    apis = list(apis)
    if any(a in _OPEN_APIS for a in apis):
        return AccessClass.OPEN_EXISTING
    if any(a.startswith("CreateProcess") for a in apis):
        return AccessClass.LAUNCH_NEW
    if any(a.startswith("ShellExecute") or a == "WinExec" for a in apis):
        return AccessClass.SHELL_LAUNCH
    return AccessClass.OTHER


@dataclass(frozen=True)
class SignatureDef:
    id: int
    api_sequence: Tuple[str, ...]
    access_class: AccessClass


class SignatureCatalog:
    """Immutable id-ordered collection of signatures."""

    def __init__(self, sigs: Iterable[SignatureDef]):
        by_id: Dict[int, SignatureDef] = {}
        for s in sigs:
            if s.id in by_id:
                raise DuplicateId(s.id)
            if not s.api_sequence:
                raise EmptySequence(s.id)
            by_id[s.id] = s
        self._by_id = dict(sorted(by_id.items()))
        # match order: longest first, then lowest id
        self._ranked = sorted(self._by_id.values(), key=lambda s: (-len(s.api_sequence), s.id))

    def __len__(self):
        return len(self._by_id)

    def __iter__(self) -> Iterator[SignatureDef]:
        return iter(self._by_id.values())

    def __getitem__(self, sig_id: int) -> SignatureDef:
        return self._by_id[sig_id]

    def __contains__(self, sig_id) -> bool:
        return sig_id in self._by_id

    @property
    def ranked(self) -> List[SignatureDef]:
        return self._ranked

    def shadowed(self) -> List[Tuple[int, int]]:
        """(id, shadowing id) pairs for entries that can never be reported.

        An entry is unreachable when a lower id carries the identical sequence.
        """
        first: Dict[Tuple[str, ...], int] = {}
        out = []
        for s in self:
            if s.api_sequence in first:
                out.append((s.id, first[s.api_sequence]))
            else:
                first[s.api_sequence] = s.id
        return out

    def class_mismatches(self) -> List[Tuple[int, AccessClass, AccessClass]]:
        """Entries whose stored access class differs from the derived one."""
        out = []
        for s in self:
            want = derive_access_class(s.api_sequence)
            if s.access_class is not want:
                out.append((s.id, s.access_class, want))
        return out


def load_catalog(raw: Union[bytes, str]) -> SignatureCatalog:
    text = raw.decode("utf-8") if isinstance(raw, (bytes, bytearray)) else raw
    sigs = []
    for line_no, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            sig_id = rec["id"]
            apis = rec["apis"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise CatalogError(f"catalog line {line_no}: {exc}") from None
        if isinstance(sig_id, bool) or not isinstance(sig_id, int):
            raise CatalogError(f"catalog line {line_no}: id must be an integer")
        if not isinstance(apis, list) or not all(isinstance(a, str) and a for a in apis):
            raise CatalogError(f"catalog line {line_no}: apis must be a list of names")
        if not apis:
            raise EmptySequence(sig_id)
        if "access_class" in rec:
            try:
                access = AccessClass(rec["access_class"])
            except ValueError:
                raise CatalogError(f"catalog line {line_no}: bad access_class {rec['access_class']!r}") from None
        else:
            access = derive_access_class(apis)
        sigs.append(SignatureDef(sig_id, tuple(apis), access))
    return SignatureCatalog(sigs)


def load_default_catalog() -> SignatureCatalog:
    return load_catalog(resources.files("spgkit").joinpath("catalog/signatures.jsonl").read_bytes())


# -- matching ---------------------------------------------------------------

@dataclass(frozen=True)
class Match:
    signature_id: int
    matched_call_seqs: Tuple[int, ...]


def _normalize_calls(calls) -> List[Tuple[int, str]]:
    out = []
    for pos, c in enumerate(calls):
        if isinstance(c, tuple):
            seq, call = c
            out.append((seq, call.api_name if isinstance(call, ApiCall) else call))
        elif isinstance(c, ApiCall):
            out.append((pos, c.api_name))
        else:
            out.append((pos, c))
    return out


def _find(seq: Sequence[str], stream: List[Tuple[int, str]]) -> Optional[Tuple[int, ...]]:
    # greedy leftmost embedding is complete for subsequence tests
    hits = []
    k = 0
    for s, name in stream:
        if name == seq[k]:
            hits.append(s)
            k += 1
            if k == len(seq):
                return tuple(hits)
    return None


def match_propagation(calls, catalog: SignatureCatalog) -> Optional[Match]:
    """Best signature for a chronological call stream.

    ``calls`` may hold ``(seq, ApiCall)`` pairs, bare ``ApiCall`` objects or
    API names; for the latter two the list position stands in for ``seq``.
    """
    stream = _normalize_calls(calls)
    for sig in catalog.ranked:
        hits = _find(sig.api_sequence, stream)
        if hits is not None:
            return Match(sig.id, hits)
    return None


# -- extraction -------------------------------------------------------------

@dataclass(frozen=True)
class InjectionEvent:
    source_pid: int
    target_pid: int
    signature_id: Optional[int]
    matched_call_seqs: Tuple[int, ...]
    via_dropped_file: bool
    first_transition_seq: int


def _norm_path(p: str) -> str:
    return ntpath.normpath(p.replace("/", "\\")).lower()


def classify_dropper(trace: ExecutionTrace, injection: InjectionEvent) -> bool:
    """True when the target's image was written by the malware before it started."""
    target = trace.processes.get(injection.target_pid)
    if target is None:
        return False
    want = _norm_path(target.image_path)
    return any(seq < target.start_seq and _norm_path(fc.file_path) == want
               for seq, _, fc in trace.file_creates)


def extract_injections(trace: ExecutionTrace, spg: Spg, catalog: SignatureCatalog) -> List[InjectionEvent]:
    """One event per (source pid, target pid) pair of cross-process edges in ``spg``."""
    live = {(e.src, e.dst) for e in spg.edges if e.kind is EdgeKind.CROSS}
    groups: Dict[Tuple[int, int], List[int]] = {}
    for seq, t in trace.transitions:
        if (t.source, t.target) in live:
            groups.setdefault((t.source.pid, t.target.pid), []).append(seq)

    out = []
    for (src, dst), seqs in groups.items():
        last = max(seqs)
        window = [(s, c) for s, c in trace.api_calls(src)
                  if s < last and (c.target_pid is None or c.target_pid == dst)]
        m = match_propagation(window, catalog)
        ev = InjectionEvent(src, dst, m.signature_id if m else None,
                            m.matched_call_seqs if m else (), False, min(seqs))
        dropped = classify_dropper(trace, ev)
        out.append(InjectionEvent(src, dst, ev.signature_id, ev.matched_call_seqs, dropped, ev.first_transition_seq))
    out.sort(key=lambda e: e.first_transition_seq)
    return out


def access_split(injections: Iterable[InjectionEvent], catalog: SignatureCatalog) -> Tuple[int, int, int]:
    """(open existing, launch new, shell launch) counts over matched injections."""
    counts = {AccessClass.OPEN_EXISTING: 0, AccessClass.LAUNCH_NEW: 0, AccessClass.SHELL_LAUNCH: 0}
    for inj in injections:
        if inj.signature_id is None or inj.signature_id not in catalog:
            continue
        cls = catalog[inj.signature_id].access_class
        if cls in counts:
            counts[cls] += 1
    return counts[AccessClass.OPEN_EXISTING], counts[AccessClass.LAUNCH_NEW], counts[AccessClass.SHELL_LAUNCH]
