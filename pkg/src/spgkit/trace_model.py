"""Trace event schema, JSONL parsing/validation and sample manifests.

A trace is one JSON object per line.  Every record carries ``seq``, ``kind``
and ``pid``; the remaining keys depend on the kind (see ``_DECODERS``).
Unknown extra keys are ignored, unknown kinds are rejected.
"""

from __future__ import annotations

import json
import ntpath
import os
import re
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Dict, Iterable, List, Optional, Tuple, Union

from .errors import (
    ConfigError,
    DanglingReference,
    EmptyTrace,
    MalformedRecord,
    NonMonotonicSeq,
)

DEFAULT_INSTRUCTION_FLOOR = 25
DISCARD_BELOW_FLOOR = "below-instruction-floor"

_SHA256_RE = re.compile(r"^[0-9a-f]{64}$")


class EventKind(str, Enum):
    PROCESS_START = "process_start"
    WAVE_ENTRY = "wave_entry"
    API_CALL = "api_call"
    CROSS_PROCESS_TRANSITION = "cross_process_transition"
    FILE_CREATE = "file_create"
    INSTRUCTION_SUMMARY = "instruction_summary"


@dataclass(frozen=True, order=True)
class NodeRef:
    """A (pid, wave) pair identifying one execution wave."""

    pid: int
    wave: int

    def label(self) -> str:
        return f"P{self.pid}W{self.wave}"


@dataclass(frozen=True)
class ProcessStart:
    image_name: str
    image_path: str
    parent_pid: Optional[int] = None


@dataclass(frozen=True)
class WaveEntry:
    wave_index: int
    predecessor: Optional[NodeRef] = None


@dataclass(frozen=True)
class ApiCall:
    api_name: str
    wave_index: int
    tainted: bool
    target_pid: Optional[int] = None
    file_path: Optional[str] = None


@dataclass(frozen=True)
class CrossProcessTransition:
    source: NodeRef
    target: NodeRef


@dataclass(frozen=True)
class FileCreate:
    file_path: str
    wave_index: int


@dataclass(frozen=True)
class InstructionSummary:
    wave_index: int
    unique_instruction_count: int


Payload = Union[
    ProcessStart, WaveEntry, ApiCall, CrossProcessTransition, FileCreate, InstructionSummary
]


@dataclass(frozen=True)
class TraceEvent:
    seq: int
    kind: EventKind
    pid: int
    payload: Payload


@dataclass(frozen=True)
class ProcessInfo:
    pid: int
    image_name: str
    image_path: str
    parent_pid: Optional[int]
    start_seq: int


@dataclass(frozen=True)
class ExecutionTrace:
    """Validated, immutable event log of one sample."""

    events: Tuple[TraceEvent, ...]

    def _of_kind(self, kind: EventKind):
        return [e for e in self.events if e.kind is kind]

    @cached_property
    def processes(self) -> Dict[int, ProcessInfo]:
        out = {}
        for e in self._of_kind(EventKind.PROCESS_START):
            p = e.payload
            out[e.pid] = ProcessInfo(e.pid, p.image_name, p.image_path, p.parent_pid, e.seq)
        return out

    @cached_property
    def initial_pid(self) -> int:
        return next(iter(self.processes))

    @cached_property
    def waves(self) -> Dict[NodeRef, WaveEntry]:
        return {NodeRef(e.pid, e.payload.wave_index): e.payload
                for e in self._of_kind(EventKind.WAVE_ENTRY)}

    @cached_property
    def transitions(self) -> List[Tuple[int, CrossProcessTransition]]:
        return [(e.seq, e.payload) for e in self._of_kind(EventKind.CROSS_PROCESS_TRANSITION)]

    @cached_property
    def file_creates(self) -> List[Tuple[int, int, FileCreate]]:
        return [(e.seq, e.pid, e.payload) for e in self._of_kind(EventKind.FILE_CREATE)]

    @cached_property
    def instruction_counts(self) -> Dict[NodeRef, int]:
        return {NodeRef(e.pid, e.payload.wave_index): e.payload.unique_instruction_count
                for e in self._of_kind(EventKind.INSTRUCTION_SUMMARY)}

    @property
    def total_unique_instructions(self) -> int:
        return sum(self.instruction_counts.values())

    def api_calls(self, pid: Optional[int] = None, tainted_only: bool = True) -> List[Tuple[int, ApiCall]]:
        """(seq, call) pairs in trace order, optionally restricted to one process."""
        out = []
        for e in self.events:
            if e.kind is not EventKind.API_CALL:
                continue
            if pid is not None and e.pid != pid:
                continue
            if tainted_only and not e.payload.tainted:
                continue
            out.append((e.seq, e.payload))
        return out


# -- parsing ---------------------------------------------------------------

def _int(rec, key, line_no, optional=False):
    if key not in rec or rec[key] is None:
        if optional:
            return None
        raise MalformedRecord(line_no, f"missing key {key!r}")
    val = rec[key]
    if isinstance(val, bool) or not isinstance(val, int):
        raise MalformedRecord(line_no, f"{key!r} must be an integer")
    return val


def _str(rec, key, line_no, optional=False):
    if key not in rec or rec[key] is None:
        if optional:
            return None
        raise MalformedRecord(line_no, f"missing key {key!r}")
    val = rec[key]
    if not isinstance(val, str) or not val:
        raise MalformedRecord(line_no, f"{key!r} must be a non-empty string")
    return val


def _basename(path: str) -> str:
    # windows paths dominate, but accept forward slashes too
    return ntpath.basename(path.replace("/", "\\"))


def _decode_process_start(rec, line_no):
    name = _str(rec, "image_name", line_no)
    path = _str(rec, "image_path", line_no)
    if _basename(path).lower() != name.lower():
        raise MalformedRecord(line_no, f"image_name {name!r} is not the basename of {path!r}")
    return ProcessStart(name, path, _int(rec, "parent_pid", line_no, optional=True))


def _decode_wave_entry(rec, line_no):
    idx = _int(rec, "wave_index", line_no)
    if idx < 0:
        raise MalformedRecord(line_no, "wave_index must be >= 0")
    pred_pid = _int(rec, "pred_pid", line_no, optional=True)
    pred_wave = _int(rec, "pred_wave", line_no, optional=True)
    if (pred_pid is None) != (pred_wave is None):
        raise MalformedRecord(line_no, "pred_pid and pred_wave must be given together")
    pred = NodeRef(pred_pid, pred_wave) if pred_pid is not None else None
    return WaveEntry(idx, pred)


def _decode_api_call(rec, line_no):
    tainted = rec.get("tainted")
    if not isinstance(tainted, bool):
        raise MalformedRecord(line_no, "'tainted' must be a boolean")
    return ApiCall(
        api_name=_str(rec, "api_name", line_no),
        wave_index=_int(rec, "wave_index", line_no),
        tainted=tainted,
        target_pid=_int(rec, "target_pid", line_no, optional=True),
        file_path=_str(rec, "file_path", line_no, optional=True),
    )


def _decode_transition(rec, line_no):
    src = NodeRef(_int(rec, "src_pid", line_no), _int(rec, "src_wave", line_no))
    dst = NodeRef(_int(rec, "dst_pid", line_no), _int(rec, "dst_wave", line_no))
    if src.pid == dst.pid:
        raise MalformedRecord(line_no, "cross-process transition within one process")
    return CrossProcessTransition(src, dst)


def _decode_file_create(rec, line_no):
    return FileCreate(_str(rec, "file_path", line_no), _int(rec, "wave_index", line_no))


def _decode_instruction_summary(rec, line_no):
    count = _int(rec, "unique_instruction_count", line_no)
    if count < 0:
        raise MalformedRecord(line_no, "unique_instruction_count must be >= 0")
    return InstructionSummary(_int(rec, "wave_index", line_no), count)


_DECODERS = {
    EventKind.PROCESS_START: _decode_process_start,
    EventKind.WAVE_ENTRY: _decode_wave_entry,
    EventKind.API_CALL: _decode_api_call,
    EventKind.CROSS_PROCESS_TRANSITION: _decode_transition,
    EventKind.FILE_CREATE: _decode_file_create,
    EventKind.INSTRUCTION_SUMMARY: _decode_instruction_summary,
}


def _decode(rec, line_no) -> TraceEvent:
    seq = _int(rec, "seq", line_no)
    kind_raw = rec.get("kind")
    try:
        kind = EventKind(kind_raw)
    except ValueError:
        raise MalformedRecord(line_no, f"unknown event kind {kind_raw!r}") from None
    pid = _int(rec, "pid", line_no)
    return TraceEvent(seq, kind, pid, _DECODERS[kind](rec, line_no))


class _Validator:
    """Checks cross-record invariants while events stream in."""

    def __init__(self):
        self.last_seq = None
        self.started = set()
        self.waves = set()
        self.summaries = set()
        self.target_refs = []

    def _need_wave(self, node, line_no, what):
        if node not in self.waves:
            raise DanglingReference(line_no, f"{what} {node.label()} was never entered")

    def check(self, ev: TraceEvent, line_no: int):
        if self.last_seq is not None and ev.seq <= self.last_seq:
            raise NonMonotonicSeq(line_no)
        self.last_seq = ev.seq

        if ev.kind is EventKind.PROCESS_START:
            if ev.pid in self.started:
                raise MalformedRecord(line_no, f"pid {ev.pid} started twice")
            self.started.add(ev.pid)
            return
        if ev.pid not in self.started:
            raise DanglingReference(line_no, f"pid {ev.pid} has no process_start")

        p = ev.payload
        if ev.kind is EventKind.WAVE_ENTRY:
            node = NodeRef(ev.pid, p.wave_index)
            if node in self.waves:
                raise MalformedRecord(line_no, f"wave {node.label()} entered twice")
            if p.predecessor is not None:
                self._need_wave(p.predecessor, line_no, "predecessor")
            self.waves.add(node)
        elif ev.kind is EventKind.API_CALL:
            self._need_wave(NodeRef(ev.pid, p.wave_index), line_no, "call site")
            if p.target_pid is not None:
                self.target_refs.append((line_no, p.target_pid))
        elif ev.kind is EventKind.CROSS_PROCESS_TRANSITION:
            if p.source.pid != ev.pid:
                raise MalformedRecord(line_no, "transition source pid differs from record pid")
            self._need_wave(p.source, line_no, "transition source")
            self._need_wave(p.target, line_no, "transition target")
        elif ev.kind is EventKind.FILE_CREATE:
            self._need_wave(NodeRef(ev.pid, p.wave_index), line_no, "file creator")
        elif ev.kind is EventKind.INSTRUCTION_SUMMARY:
            node = NodeRef(ev.pid, p.wave_index)
            self._need_wave(node, line_no, "summary")
            if node in self.summaries:
                raise MalformedRecord(line_no, f"second instruction summary for {node.label()}")
            self.summaries.add(node)

    def finish(self):
        for line_no, pid in self.target_refs:
            if pid not in self.started:
                raise DanglingReference(line_no, f"target_pid {pid} never started")


def parse_trace(raw: Union[bytes, str]) -> ExecutionTrace:
    """Parse and validate a JSONL trace."""
    text = raw.decode("utf-8") if isinstance(raw, (bytes, bytearray)) else raw
    validator = _Validator()
    events = []
    for line_no, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedRecord(line_no, exc.msg) from None
        if not isinstance(rec, dict):
            raise MalformedRecord(line_no, "record is not a JSON object")
        ev = _decode(rec, line_no)
        validator.check(ev, line_no)
        events.append(ev)
    if not events:
        raise EmptyTrace()
    validator.finish()
    return ExecutionTrace(tuple(events))


def read_trace(path: Union[str, os.PathLike]) -> ExecutionTrace:
    with open(path, "rb") as fh:
        return parse_trace(fh.read())


# -- serialization ---------------------------------------------------------

def event_to_record(ev: TraceEvent) -> dict:
    rec = {"seq": ev.seq, "kind": ev.kind.value, "pid": ev.pid}
    p = ev.payload
    if ev.kind is EventKind.PROCESS_START:
        rec.update(image_name=p.image_name, image_path=p.image_path)
        if p.parent_pid is not None:
            rec["parent_pid"] = p.parent_pid
    elif ev.kind is EventKind.WAVE_ENTRY:
        rec["wave_index"] = p.wave_index
        if p.predecessor is not None:
            rec.update(pred_pid=p.predecessor.pid, pred_wave=p.predecessor.wave)
    elif ev.kind is EventKind.API_CALL:
        rec.update(api_name=p.api_name, wave_index=p.wave_index, tainted=p.tainted)
        if p.target_pid is not None:
            rec["target_pid"] = p.target_pid
        if p.file_path is not None:
            rec["file_path"] = p.file_path
    elif ev.kind is EventKind.CROSS_PROCESS_TRANSITION:
        rec.update(src_pid=p.source.pid, src_wave=p.source.wave,
                   dst_pid=p.target.pid, dst_wave=p.target.wave)
    elif ev.kind is EventKind.FILE_CREATE:
        rec.update(file_path=p.file_path, wave_index=p.wave_index)
    else:
        rec.update(wave_index=p.wave_index, unique_instruction_count=p.unique_instruction_count)
    return rec


def serialize_records(records: Iterable[dict]) -> bytes:
    lines = [json.dumps(r, ensure_ascii=False) for r in records]
    return ("\n".join(lines) + "\n").encode("utf-8")


def serialize_trace(trace: ExecutionTrace) -> bytes:
    return serialize_records(event_to_record(e) for e in trace.events)


# -- viability -------------------------------------------------------------

@dataclass(frozen=True)
class Viability:
    viable: bool
    reason: Optional[str] = None


def validate_sample_viability(trace: ExecutionTrace,
                              floor: int = DEFAULT_INSTRUCTION_FLOOR) -> Viability:
    """Discard samples that executed fewer than ``floor`` unique instructions."""
    if trace.total_unique_instructions < floor:
        return Viability(False, DISCARD_BELOW_FLOOR)
    return Viability(True)


# -- manifests -------------------------------------------------------------

@dataclass(frozen=True)
class SampleMeta:
    sample_id: str
    family: str
    first_seen_year: Optional[int]
    trace_path: str

    def __post_init__(self):
        if not _SHA256_RE.match(self.sample_id):
            raise ValueError(f"sample_id must be 64 lowercase hex chars: {self.sample_id!r}")
        if self.first_seen_year is not None and not 2000 <= self.first_seen_year <= 2100:
            raise ValueError(f"first_seen_year out of range: {self.first_seen_year}")


def load_manifest(path: Union[str, os.PathLike]) -> List[SampleMeta]:
    """Read a JSONL manifest; relative trace paths resolve against its directory."""
    base = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from None
    metas = []
    for line_no, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            trace_path = rec["trace_path"]
            if not os.path.isabs(trace_path):
                trace_path = os.path.join(base, trace_path)
            metas.append(SampleMeta(rec["sample_id"], rec["family"],
                                    rec.get("first_seen_year"), trace_path))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{path}:{line_no}: bad manifest record ({exc})") from None
    return metas
