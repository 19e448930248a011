from __future__ import annotations

import json

import pytest

from spgkit.errors import ConfigError, DanglingReference, EmptyTrace, MalformedRecord, NonMonotonicSeq
from spgkit.trace_model import (
    DISCARD_BELOW_FLOOR,
    EventKind,
    NodeRef,
    SampleMeta,
    load_manifest,
    parse_trace,
    read_trace,
    serialize_trace,
    validate_sample_viability,
)

from sample_traces import natas_trace, tinba_trace
from tracebuild import TraceBuilder


def _one_process(count=100):
    b = TraceBuilder()
    b.start(10, "a.exe")
    b.wave(10, 0)
    b.summary(10, 0, count)
    return b


def test_tinba_fixture_counts():
    t = parse_trace(tinba_trace())
    assert len(t.processes) == 8
    assert len(t.waves) == 10
    assert t.initial_pid == 1000


def test_natas_fixture_counts():
    t = parse_trace(natas_trace())
    assert len(t.processes) == 11
    assert len(t.waves) == 12


def test_empty_trace():
    with pytest.raises(EmptyTrace):
        parse_trace(b"")
    with pytest.raises(EmptyTrace):
        parse_trace("\n\n")


def test_non_monotonic_seq_reports_line():
    lines = [
        {"seq": 1, "kind": "process_start", "pid": 1, "image_name": "a.exe", "image_path": "C:\\a.exe"},
        {"seq": 2, "kind": "wave_entry", "pid": 1, "wave_index": 0},
        {"seq": 2, "kind": "instruction_summary", "pid": 1, "wave_index": 0, "unique_instruction_count": 5},
    ]
    raw = "\n".join(json.dumps(r) for r in lines)
    with pytest.raises(NonMonotonicSeq) as exc:
        parse_trace(raw)
    assert exc.value.line_no == 3


def test_unknown_kind_rejected_and_extra_keys_ignored():
    b = _one_process()
    b.raw({"seq": 99, "kind": "registry_write", "pid": 10})
    with pytest.raises(MalformedRecord) as exc:
        parse_trace(b.text())
    assert exc.value.line_no == 4

    b = _one_process()
    b.records[0]["colour"] = "blue"
    assert len(parse_trace(b.text()).processes) == 1


def test_bad_json_line():
    with pytest.raises(MalformedRecord) as exc:
        parse_trace('{"seq": 1, "kind": "process_start"\n')
    assert exc.value.line_no == 1


def test_event_before_process_start_is_dangling():
    b = TraceBuilder()
    b.start(1, "a.exe")
    b.wave(2, 0)
    with pytest.raises(DanglingReference):
        parse_trace(b.text())


def test_predecessor_must_exist():
    b = TraceBuilder()
    b.start(1, "a.exe")
    b.wave(1, 1, pred=(1, 0))
    with pytest.raises(DanglingReference):
        parse_trace(b.text())


def test_transition_into_unknown_wave_is_dangling():
    b = _one_process()
    b.transition((10, 0), (77, 0))
    with pytest.raises(DanglingReference):
        parse_trace(b.text())


def test_target_pid_must_be_started_somewhere():
    b = _one_process()
    b.call(10, 0, "OpenProcess", target=55)
    with pytest.raises(DanglingReference):
        parse_trace(b.text())
    # started later in the trace is fine
    b.start(55, "b.exe")
    parse_trace(b.text())


def test_pid_reuse_rejected():
    b = _one_process()
    b.start(10, "a.exe")
    with pytest.raises(MalformedRecord):
        parse_trace(b.text())


def test_image_name_must_match_path():
    b = TraceBuilder()
    b.start(1, "a.exe", "C:\\bin\\b.exe")
    with pytest.raises(MalformedRecord):
        parse_trace(b.text())
    b = TraceBuilder()
    b.start(1, "A.EXE", "c:/bin/a.exe")
    parse_trace(b.text())


def test_duplicate_summary_rejected():
    b = _one_process()
    b.summary(10, 0, 3)
    with pytest.raises(MalformedRecord):
        parse_trace(b.text())


def test_tainted_must_be_bool():
    b = _one_process()
    b.raw({"seq": 50, "kind": "api_call", "pid": 10, "api_name": "Sleep", "wave_index": 0, "tainted": 1})
    with pytest.raises(MalformedRecord):
        parse_trace(b.text())


def test_round_trip_preserves_structure():
    for raw in (tinba_trace(), natas_trace()):
        t = parse_trace(raw)
        again = parse_trace(serialize_trace(t))
        assert again.events == t.events
        assert serialize_trace(again) == serialize_trace(t)


def test_parse_is_deterministic():
    assert parse_trace(natas_trace()) == parse_trace(natas_trace())


def test_api_call_views():
    t = parse_trace(tinba_trace())
    calls = t.api_calls(1000)
    assert [c.api_name for _, c in calls][:2] == ["VirtualAlloc", "CreateProcessA"]
    assert all(e.kind is EventKind.API_CALL for e in t.events if e.seq in {s for s, _ in calls})


def test_waves_keyed_by_noderef():
    t = parse_trace(tinba_trace())
    assert t.waves[NodeRef(1000, 1)].predecessor == NodeRef(1000, 0)


def test_viability_boundary():
    assert validate_sample_viability(parse_trace(_one_process(24).text())).reason == DISCARD_BELOW_FLOOR
    assert validate_sample_viability(parse_trace(_one_process(25).text())).viable
    assert validate_sample_viability(parse_trace(_one_process(10000).text())).viable


def test_viability_sums_across_waves():
    b = _one_process(12)
    b.wave(10, 1, pred=(10, 0))
    b.summary(10, 1, 13)
    assert validate_sample_viability(parse_trace(b.text())).viable


def test_sample_meta_validation():
    SampleMeta("a" * 64, "Tinba", 2014, "x.jsonl")
    with pytest.raises(ValueError):
        SampleMeta("A" * 64, "Tinba", 2014, "x.jsonl")
    with pytest.raises(ValueError):
        SampleMeta("a" * 63, "Tinba", 2014, "x.jsonl")
    with pytest.raises(ValueError):
        SampleMeta("a" * 64, "Tinba", 1999, "x.jsonl")


def test_manifest_resolves_relative_paths(tmp_path):
    (tmp_path / "t.jsonl").write_bytes(tinba_trace())
    man = tmp_path / "manifest.jsonl"
    man.write_text(json.dumps({"sample_id": "b" * 64, "family": "Tinba",
                               "first_seen_year": 2014, "trace_path": "t.jsonl"}) + "\n")
    [meta] = load_manifest(man)
    assert read_trace(meta.trace_path).initial_pid == 1000


def test_manifest_bad_record(tmp_path):
    man = tmp_path / "manifest.jsonl"
    man.write_text('{"sample_id": "zz"}\n')
    with pytest.raises(ConfigError):
        load_manifest(man)
    with pytest.raises(ConfigError):
        load_manifest(tmp_path / "missing.jsonl")
