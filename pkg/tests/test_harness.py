from __future__ import annotations

import json
import random

import pytest

from conftest import cf, call
from reference import counters_from_edges, simulate_block_sequence

from runfuzz.fixtures import fixture_path
from runfuzz.harness import (
    MutationEngine,
    ProgramFormatError,
    execute,
    load_program,
    parse_program,
)


def straight_line():
    return parse_program({
        "blocks": ["a", "b", "c"],
        "entry": "a",
        "edges": [cf("a", "b"), cf("b", "c")],
    })


def test_straight_line_counts_each_edge_once():
    p = straight_line()
    result = execute(p, b"")
    assert result.raw_counters[0] == 1
    assert result.raw_counters[1] == 1
    assert sum(result.raw_counters) == 2
    assert not result.crashed
    assert result.steps == 3


def test_execute_is_pure():
    p = load_program(fixture_path("uninit_ptr"))
    data = bytes([0x4D, 0xCE, 0, 0, 0, 0x51, 0, 0])
    first = execute(p, data)
    for _ in range(5):
        again = execute(p, data)
        assert again == first


def test_overflow_precondition_fixture():
    p = load_program(fixture_path("overflow_precondition"))
    # short/default string: reaches the target block without crashing
    r = execute(p, bytes([0x00, 0x99]))
    assert not r.crashed
    assert (r.covered_blocks >> p.dense_index["foo_copy"]) & 1
    # attacker-controlled long string first: same target block now crashes
    r = execute(p, bytes([0x47, 0x99]))
    assert r.crashed and r.crash_block == "foo_copy"


def test_uninit_ptr_crash_requires_prior_alloc():
    p = load_program(fixture_path("uninit_ptr"))
    chain = bytearray(8)
    chain[2], chain[3], chain[4] = 0x7A, 0x33, 0xC4
    # dereference executes but the allocation block never ran: no crash
    r = execute(p, bytes(chain))
    assert not r.crashed
    # same path with the magic format bytes: allocation ran earlier, crash
    chain[0], chain[1] = 0x4D, 0xCE
    r = execute(p, bytes(chain))
    assert r.crashed and r.crash_block == "cmp_deref"


def test_crash_reproducible_from_input_alone():
    p = load_program(fixture_path("uninit_ptr"))
    data = bytes([0x4D, 0xCE, 0x7A, 0x33, 0xC4, 0, 0, 0])
    assert execute(p, data).crashed
    assert execute(p, data).crashed


def test_counters_match_resimulation_oracle():
    rng = random.Random(31)
    for name in ("uninit_ptr", "branch_maze", "overflow_precondition"):
        p = load_program(fixture_path(name))
        for _ in range(50):
            data = bytes(rng.randrange(256) for _ in range(rng.randrange(0, 10)))
            counters, executed, crash_idx, steps, hung = p.run(data)
            blocks_seq, edges_seq, crashed, _ = simulate_block_sequence(p, data)
            assert (crash_idx >= 0) == crashed
            assert bytes(counters) == bytes(counters_from_edges(edges_seq, p.map_bytes))
            assert steps == len(blocks_seq)
            want_mask = 0
            for b in blocks_seq:
                want_mask |= 1 << p.block_index[b]
            assert executed == want_mask


def test_counter_saturation():
    # 300 identical call edges share one edge id; its counter caps at 255
    doc = {
        "blocks": ["a", "f"],
        "entry": "a",
        "edges": [call("a", "f")] * 300,
    }
    p = parse_program(doc)
    counters, _, _, steps, hung = p.run(b"")
    assert counters[0] == 255
    assert steps == 301
    assert not hung


def test_step_limit_hangs():
    doc = {
        "blocks": ["a", "b"],
        "entry": "a",
        "edges": [cf("a", "b"), cf("b", "a")],
    }
    p = parse_program(doc)
    _, _, crash_idx, steps, hung = p.run(b"", 50)
    assert hung and crash_idx < 0 and steps == 51
    with pytest.raises(ValueError):
        execute(p, b"", 0)


def test_guard_reads_past_end_as_zero():
    doc = {
        "blocks": ["a", "yes", "no"],
        "entry": "a",
        "edges": [cf("a", "yes"), cf("a", "no")],
        "guards": {"a": {"offset": 1000, "op": "==", "value": 0,
                         "then": "yes", "else": "no"}},
    }
    p = parse_program(doc)
    _, executed, _, _, _ = p.run(b"xy")
    assert (executed >> p.block_index["yes"]) & 1


def test_guard_range_op():
    doc = {
        "blocks": ["a", "mid", "out"],
        "entry": "a",
        "edges": [cf("a", "mid"), cf("a", "out")],
        "guards": {"a": {"offset": 0, "op": "range", "lo": 10, "hi": 20,
                         "then": "mid", "else": "out"}},
    }
    p = parse_program(doc)
    for byte, want in ((9, "out"), (10, "mid"), (20, "mid"), (21, "out")):
        _, executed, _, _, _ = p.run(bytes([byte]))
        assert (executed >> p.block_index[want]) & 1, byte


# document parsing -----------------------------------------------------------

def test_parse_error_names_field():
    with pytest.raises(ProgramFormatError, match="missing field 'entry'"):
        parse_program({"blocks": ["a"], "edges": []})
    with pytest.raises(ProgramFormatError, match="edges\\[0\\]"):
        parse_program({"blocks": ["a"], "entry": "a", "edges": [{"src": "a"}]})
    with pytest.raises(ProgramFormatError, match="guards"):
        parse_program({
            "blocks": ["a", "b"], "entry": "a", "edges": [cf("a", "b")],
            "guards": {"a": {"offset": 0, "op": "<=", "value": 1,
                             "then": "b", "else": "b"}},
        })


def test_parse_error_branch_without_guard():
    with pytest.raises(ProgramFormatError, match="no guard"):
        parse_program({
            "blocks": ["a", "b", "c"], "entry": "a",
            "edges": [cf("a", "b"), cf("a", "c")],
        })


def test_parse_error_bad_json_names_line(tmp_path):
    path = tmp_path / "prog.json"
    path.write_text('{\n  "blocks": [,]\n}\n')
    with pytest.raises(ProgramFormatError, match="line 2"):
        load_program(path)


def test_unresolvable_target_location_dropped(tmp_path):
    path = tmp_path / "prog.json"
    path.write_text(json.dumps({
        "blocks": ["a", "b"], "entry": "a", "edges": [cf("a", "b")],
        "targets": {"x.c:1": ["b"]},
    }))
    tfile = tmp_path / "targets.txt"
    tfile.write_text("x.c:1 2.0\nmissing.c:9\n")
    p = load_program(path, tfile)
    assert p.target_blocks == ["b"]
    assert p.target_spec.locations == [("x.c:1", 2.0)]


# mutation -------------------------------------------------------------------

def test_bitflip_stage_zero_is_msb():
    eng = MutationEngine()
    out = eng.mutate(b"\x00", 0, random.Random(0))
    assert out == b"\x80"


def test_det_stages_cover_expected_count():
    eng = MutationEngine()
    assert eng.det_stage_count(1) == 8 + 7 + 5
    assert eng.det_stage_count(0) == 0
    data = b"\xa5\x01"
    det = eng.det_stage_count(len(data))
    rng = random.Random(0)
    mutants = [eng.mutate(data, i, rng) for i in range(det)]
    assert all(len(m) == len(data) for m in mutants)
    assert all(m != data for m in mutants)


def test_mutation_determinism():
    eng = MutationEngine()
    outs1 = [eng.mutate(b"hello", i, random.Random(42)) for i in range(200)]
    outs2 = [eng.mutate(b"hello", i, random.Random(42)) for i in range(200)]
    assert outs1 == outs2


def test_havoc_respects_max_length():
    eng = MutationEngine(max_len=4096)
    rng = random.Random(5)
    data = b"abcd"
    for _ in range(100_000):
        out = eng.havoc(data, rng)
        assert len(out) <= 4096


def test_havoc_empty_input_extends():
    eng = MutationEngine()
    rng = random.Random(9)
    for _ in range(50):
        assert len(eng.havoc(b"", rng)) > 0
