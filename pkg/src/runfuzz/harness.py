"""Simulated program under test plus the mutation engine.

A program is a guarded ICFG: every branching block compares one input byte
against a constant to pick its successor, call edges run the callee to
completion before the caller continues, and crash rules fire at a block
only if a required earlier block was executed in the same run.  Execution
is a pure function of (program, input bytes).

The program document is JSON with ``blocks``, ``edges``, ``entry``,
optional ``targets``/``target_weights``, ``guards``, and ``crash_rules``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

from .coverage import map_size_bytes
from .icfg import CALL, CONTROL_FLOW, Edge, Icfg, TargetSpec, reachable_subgraph

log = logging.getLogger(__name__)

GUARD_OPS = ("==", "!=", "<", ">", "range")

_OP_EQ, _OP_NE, _OP_LT, _OP_GT, _OP_RANGE = range(5)
_OP_CODE = {"==": _OP_EQ, "!=": _OP_NE, "<": _OP_LT, ">": _OP_GT, "range": _OP_RANGE}


class ProgramFormatError(ValueError):
    """The program document cannot be parsed; message names the bad field."""


@dataclass(frozen=True)
class Guard:
    offset: int
    op: str
    value: int
    hi: int
    then_block: str
    else_block: str


@dataclass(frozen=True)
class CrashRule:
    block: str
    requires_prior: str | None = None


class SimProgram:
    """Deterministic guarded-ICFG interpreter."""

    def __init__(self, icfg: Icfg, guards: dict[str, Guard],
                 crash_rules, target_spec: TargetSpec, name: str = "program"):
        self.icfg = icfg
        self.guards = dict(guards)
        self.crash_rules = list(crash_rules)
        self.target_spec = target_spec
        self.name = name
        self.n_edges = len(icfg.edges)
        self.map_bytes = map_size_bytes(self.n_edges)
        self.target_blocks = target_spec.target_blocks()
        self.dense_order, self.dense_index = reachable_subgraph(
            icfg, self.target_blocks)
        self._validate()
        self._compile()

    def _validate(self) -> None:
        for b, g in self.guards.items():
            succ = self.icfg.cf_succ[b]
            for leg in (g.then_block, g.else_block):
                if leg not in succ:
                    raise ProgramFormatError(
                        f"guard on {b!r}: branch {leg!r} is not a control-flow successor")
        for b in self.icfg.blocks:
            if len(set(self.icfg.cf_succ[b])) > 1 and b not in self.guards:
                raise ProgramFormatError(
                    f"block {b!r} has multiple successors but no guard")
        for r in self.crash_rules:
            if r.block not in self.icfg.block_set:
                raise ProgramFormatError(f"crash rule on undeclared block {r.block!r}")
            if r.requires_prior is not None and r.requires_prior not in self.icfg.block_set:
                raise ProgramFormatError(
                    f"crash rule prior {r.requires_prior!r} is not a declared block")

    def _compile(self) -> None:
        """Index everything by block position for the interpreter loop."""
        idx = {b: i for i, b in enumerate(self.icfg.blocks)}
        self.block_index = idx
        n = len(self.icfg.blocks)
        edge_id = {}
        for i, e in enumerate(self.icfg.edges):
            edge_id.setdefault((e.src, e.dst, e.kind), i)
        self._calls = [[] for _ in range(n)]
        self._single = [(-1, -1)] * n  # (succ idx, edge id) or -1
        self._guard = [None] * n
        self._crash = [None] * n  # block idx -> prior idx (-1 = unconditional)
        for b in self.icfg.blocks:
            bi = idx[b]
            for dst in self.icfg.call_succ[b]:
                self._calls[bi].append((edge_id[(b, dst, CALL)], idx[dst]))
            g = self.guards.get(b)
            if g is not None:
                self._guard[bi] = (
                    g.offset, _OP_CODE[g.op], g.value, g.hi,
                    idx[g.then_block], edge_id[(b, g.then_block, CONTROL_FLOW)],
                    idx[g.else_block], edge_id[(b, g.else_block, CONTROL_FLOW)],
                )
            else:
                succ = self.icfg.cf_succ[b]
                if succ:
                    self._single[bi] = (idx[succ[0]], edge_id[(b, succ[0], CONTROL_FLOW)])
        for r in self.crash_rules:
            prior = -1 if r.requires_prior is None else idx[r.requires_prior]
            self._crash[idx[r.block]] = prior
        self._entry_idx = idx[self.icfg.entry]
        # bit per declared block for the executed mask
        self.target_mask = 0
        for t in self.target_blocks:
            self.target_mask |= 1 << idx[t]

    # interpreter ---------------------------------------------------------

    def run(self, data: bytes, step_limit: int = 100_000):
        """Execute; returns (counters, executed_mask, crash_idx, steps, hung).

        ``executed_mask`` has one bit per declared block (by declaration
        index); ``crash_idx`` is the crashing block's index or -1.
        """
        counters = bytearray(self.map_bytes)
        ctx = [0, 0, -1, False]  # steps, executed mask, crash idx, hung
        self._walk(self._entry_idx, data, counters, ctx, step_limit)
        return counters, ctx[1], ctx[2], ctx[0], ctx[3]

    def _walk(self, block, data, counters, ctx, limit) -> bool:
        ln = len(data)
        guard = self._guard
        single = self._single
        calls = self._calls
        crash = self._crash
        while block >= 0:
            steps = ctx[0] + 1
            ctx[0] = steps
            if steps > limit:
                ctx[3] = True
                return False
            ctx[1] |= 1 << block
            prior = crash[block]
            if prior is not None:
                if prior < 0 or (ctx[1] >> prior) & 1:
                    ctx[2] = block
                    return False
            for eid, callee in calls[block]:
                c = counters[eid]
                if c < 255:
                    counters[eid] = c + 1
                if not self._walk(callee, data, counters, ctx, limit):
                    return False
            g = guard[block]
            if g is not None:
                off, opc, v, hi, t_idx, t_eid, e_idx, e_eid = g
                byte = data[off] if off < ln else 0
                if opc == _OP_EQ:
                    taken = byte == v
                elif opc == _OP_NE:
                    taken = byte != v
                elif opc == _OP_LT:
                    taken = byte < v
                elif opc == _OP_GT:
                    taken = byte > v
                else:
                    taken = v <= byte <= hi
                succ, eid = (t_idx, t_eid) if taken else (e_idx, e_eid)
            else:
                succ, eid = single[block]
                if succ < 0:
                    return True  # function end
            c = counters[eid]
            if c < 255:
                counters[eid] = c + 1
            block = succ
        return True

    def dense_covered_mask(self, executed_mask: int) -> int:
        """Compress the executed-block mask onto the dense subgraph ids."""
        covered = 0
        blocks = self.icfg.blocks
        dense = self.dense_index
        m = executed_mask
        while m:
            low = m & -m
            bi = low.bit_length() - 1
            di = dense.get(blocks[bi])
            if di is not None:
                covered |= 1 << di
            m ^= low
        return covered

    def covered_targets(self, executed_mask: int) -> tuple[str, ...]:
        hit = executed_mask & self.target_mask
        if not hit:
            return ()
        blocks = self.icfg.blocks
        out = []
        while hit:
            low = hit & -hit
            out.append(blocks[low.bit_length() - 1])
            hit ^= low
        return tuple(sorted(out))


@dataclass
class ExecResult:
    raw_counters: bytes
    covered_blocks: int  # dense bitmap over the target-reaching subgraph
    crashed: bool
    crash_block: str | None
    steps: int
    hung: bool


def execute(program: SimProgram, data: bytes, step_limit: int = 100_000) -> ExecResult:
    if step_limit <= 0:
        raise ValueError("step_limit must be positive")
    counters, executed, crash_idx, steps, hung = program.run(data, step_limit)
    return ExecResult(
        raw_counters=bytes(counters),
        covered_blocks=program.dense_covered_mask(executed),
        crashed=crash_idx >= 0,
        crash_block=None if crash_idx < 0 else program.icfg.blocks[crash_idx],
        steps=steps,
        hung=hung,
    )


# document parsing ---------------------------------------------------------

def _field(doc: dict, name: str, kind, label: str):
    if name not in doc:
        raise ProgramFormatError(f"{label}: missing field '{name}'")
    value = doc[name]
    if not isinstance(value, kind):
        raise ProgramFormatError(f"{label}: field '{name}' has the wrong type")
    return value


def _parse_guard(block: str, raw: dict, label: str) -> Guard:
    where = f"{label}: guards[{block!r}]"
    if not isinstance(raw, dict):
        raise ProgramFormatError(f"{where}: expected an object")
    op = raw.get("op")
    if op not in GUARD_OPS:
        raise ProgramFormatError(f"{where}: field 'op' must be one of {GUARD_OPS}")
    try:
        offset = int(raw["offset"])
        then_block = raw["then"]
        else_block = raw["else"]
        if op == "range":
            value = int(raw["lo"])
            hi = int(raw["hi"])
        else:
            value = int(raw["value"])
            hi = value
    except (KeyError, TypeError, ValueError) as exc:
        raise ProgramFormatError(f"{where}: {exc}") from exc
    if offset < 0:
        raise ProgramFormatError(f"{where}: field 'offset' must be non-negative")
    return Guard(offset, op, value, hi, then_block, else_block)


def parse_program(doc: dict, label: str = "program") -> SimProgram:
    blocks = _field(doc, "blocks", list, label)
    entry = _field(doc, "entry", str, label)
    edges = []
    for i, e in enumerate(_field(doc, "edges", list, label)):
        try:
            edges.append(Edge(e["src"], e["dst"], e["kind"]))
        except (KeyError, TypeError) as exc:
            raise ProgramFormatError(f"{label}: edges[{i}]: {exc}") from exc
    try:
        icfg = Icfg(blocks, edges, entry)
    except ValueError as exc:
        raise ProgramFormatError(f"{label}: {exc}") from exc

    guards = {}
    for b, raw in doc.get("guards", {}).items():
        if b not in icfg.block_set:
            raise ProgramFormatError(f"{label}: guards[{b!r}]: undeclared block")
        guards[b] = _parse_guard(b, raw, label)

    rules = []
    for i, raw in enumerate(doc.get("crash_rules", [])):
        if not isinstance(raw, dict) or "block" not in raw:
            raise ProgramFormatError(f"{label}: crash_rules[{i}]: expected an object with 'block'")
        rules.append(CrashRule(raw["block"], raw.get("requires_prior")))

    spec = parse_target_spec(doc, icfg, label)
    return SimProgram(icfg, guards, rules, spec, name=doc.get("name", label))


def parse_target_spec(doc: dict, icfg: Icfg, label: str,
                      selection: list[tuple[str, float]] | None = None) -> TargetSpec:
    """Resolve the document's target locations, optionally restricted and
    re-weighted by a separate selection list.  Locations that resolve to no
    block are dropped with a warning."""
    mapping_raw = doc.get("targets", {})
    if not isinstance(mapping_raw, dict):
        raise ProgramFormatError(f"{label}: field 'targets' must be an object")
    mapping: dict[str, set[str]] = {}
    for loc, names in mapping_raw.items():
        if not isinstance(names, list):
            raise ProgramFormatError(f"{label}: targets[{loc!r}] must be a list of blocks")
        blocks = set()
        for n in names:
            if n not in icfg.block_set:
                raise ProgramFormatError(f"{label}: targets[{loc!r}]: undeclared block {n!r}")
            blocks.add(n)
        mapping[loc] = blocks
    doc_weights = doc.get("target_weights", {})

    if selection is None:
        wanted = [(loc, float(doc_weights.get(loc, 1.0))) for loc in sorted(mapping)]
    else:
        wanted = selection
    locations: list[tuple[str, float]] = []
    resolved: dict[str, set[str]] = {}
    for loc, w in wanted:
        blocks = mapping.get(loc, set())
        if not blocks:
            log.warning("target location %s is unreachable; dropped", loc)
            continue
        if w < 0:
            raise ProgramFormatError(f"{label}: negative weight for target {loc!r}")
        locations.append((loc, w))
        resolved[loc] = blocks
    return TargetSpec(locations=locations, blocks_by_location=resolved)


def load_program(path, targets_path=None) -> SimProgram:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ProgramFormatError(
            f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ProgramFormatError(f"{path}: top level must be an object")
    program = parse_program(doc, label=str(path))
    if targets_path is not None:
        selection = load_target_list(targets_path)
        spec = parse_target_spec(doc, program.icfg, str(path), selection)
        program = SimProgram(program.icfg, program.guards, program.crash_rules,
                             spec, name=program.name)
    return program


def load_target_list(path) -> list[tuple[str, float]]:
    """Targets file: one 'file.c:123' per line, optional trailing weight."""
    out: list[tuple[str, float]] = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) > 2:
            raise ProgramFormatError(f"{path}: line {ln}: expected 'location [weight]'")
        weight = 1.0
        if len(parts) == 2:
            try:
                weight = float(parts[1])
            except ValueError as exc:
                raise ProgramFormatError(f"{path}: line {ln}: bad weight {parts[1]!r}") from exc
        out.append((parts[0], weight))
    return out


# mutation -----------------------------------------------------------------

class MutationEngine:
    """Deterministic bitflip stages followed by stacked havoc mutations.

    The same (seed bytes, rng state, stage index) always yields the same
    mutant.  Bit order is MSB-first within each byte.
    """

    HAVOC_OPS = 6

    def __init__(self, max_len: int = 4096):
        self.max_len = max_len

    def det_stage_count(self, length: int) -> int:
        if length <= 0:
            return 0
        bits = 8 * length
        return bits + (bits - 1) + (bits - 3)

    def mutate(self, data: bytes, stage_index: int, rng) -> bytes:
        det = self.det_stage_count(len(data))
        if stage_index < det:
            return self._det_stage(data, stage_index)
        return self.havoc(data, rng)

    def _det_stage(self, data: bytes, stage: int) -> bytes:
        bits = 8 * len(data)
        if stage < bits:
            return self._flip(data, stage, 1)
        stage -= bits
        if stage < bits - 1:
            return self._flip(data, stage, 2)
        stage -= bits - 1
        return self._flip(data, stage, 4)

    @staticmethod
    def _flip(data: bytes, start: int, width: int) -> bytes:
        out = bytearray(data)
        for i in range(start, start + width):
            out[i // 8] ^= 0x80 >> (i % 8)
        return bytes(out)

    def havoc(self, data: bytes, rng) -> bytes:
        out = bytearray(data)
        for _ in range(1 + rng.randrange(8)):
            op = 5 if not out else rng.randrange(self.HAVOC_OPS)
            if op == 0:  # flip one bit
                pos = rng.randrange(len(out) * 8)
                out[pos // 8] ^= 0x80 >> (pos % 8)
            elif op == 1:  # set one byte
                out[rng.randrange(len(out))] = rng.randrange(256)
            elif op == 2:  # add/subtract a small delta
                pos = rng.randrange(len(out))
                delta = 1 + rng.randrange(35)
                if rng.randrange(2):
                    delta = -delta
                out[pos] = (out[pos] + delta) & 0xFF
            elif op == 3:  # duplicate a chunk
                size = 1 + rng.randrange(min(len(out), 16))
                src = rng.randrange(len(out) - size + 1)
                ins = rng.randrange(len(out) + 1)
                out[ins:ins] = out[src:src + size]
                del out[self.max_len:]
            elif op == 4:  # truncate
                if len(out) > 1:
                    del out[1 + rng.randrange(len(out) - 1):]
            else:  # extend with random bytes
                out += rng.randbytes(1 + rng.randrange(8))
                del out[self.max_len:]
        return bytes(out)
