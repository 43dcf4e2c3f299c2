from __future__ import annotations

import logging
import random

import pytest

from runfuzz.harness import parse_program
from runfuzz.icfg import Edge, Icfg

logging.getLogger("runfuzz").setLevel(logging.ERROR)


def cf(src, dst):
    return {"src": src, "dst": dst, "kind": "cf"}


def call(src, dst):
    return {"src": src, "dst": dst, "kind": "call"}


def make_icfg(edges, entry=None, extra_blocks=()):
    """Graph from (src, dst[, kind]) tuples; blocks inferred."""
    parsed = []
    blocks = list(extra_blocks)
    for e in edges:
        src, dst = e[0], e[1]
        kind = e[2] if len(e) > 2 else "cf"
        parsed.append(Edge(src, dst, kind))
        for b in (src, dst):
            if b not in blocks:
                blocks.append(b)
    if entry is None:
        entry = blocks[0]
    return Icfg(blocks, parsed, entry)


def random_icfg(rng: random.Random, n_blocks: int, call_prob=0.15, fan=3):
    """Random graph shaped like call-heavy control flow; may be cyclic."""
    blocks = [f"b{i:03d}" for i in range(n_blocks)]
    edges = []
    for i, b in enumerate(blocks):
        n_cf = rng.randrange(0, fan)
        cf_dsts = set()
        for _ in range(n_cf):
            cf_dsts.add(blocks[rng.randrange(n_blocks)])
        for d in sorted(cf_dsts):
            edges.append(Edge(b, d, "cf"))
        if rng.random() < call_prob:
            edges.append(Edge(b, blocks[rng.randrange(n_blocks)], "call"))
    return Icfg(blocks, edges, blocks[0])


def random_dag(rng: random.Random, n_blocks: int, extra=2):
    """Random DAG over topologically ordered names."""
    blocks = [f"n{i:02d}" for i in range(n_blocks)]
    edges = []
    for i in range(n_blocks - 1):
        j = rng.randrange(i + 1, n_blocks)
        edges.append(Edge(blocks[i], blocks[j], "cf"))
    for _ in range(extra * n_blocks // 2):
        i = rng.randrange(n_blocks - 1)
        j = rng.randrange(i + 1, n_blocks)
        kind = "call" if rng.random() < 0.2 else "cf"
        edges.append(Edge(blocks[i], blocks[j], kind))
    # drop duplicate cf edges so guard-less parsing stays possible elsewhere
    seen = set()
    uniq = []
    for e in edges:
        key = (e.src, e.dst, e.kind)
        if key in seen:
            continue
        seen.add(key)
        uniq.append(e)
    return Icfg(blocks, uniq, blocks[0])


# uninit_ptr fixture helpers -------------------------------------------------

TAIL_PATTERNS = [
    (0x00, 0x00, 0x00), (0x51, 0x00, 0x00), (0x51, 0x62, 0x00), (0x00, 0x73, 0x00),
    (0x51, 0x00, 0x84), (0x00, 0x73, 0x84), (0x51, 0x62, 0x84), (0x00, 0x00, 0x84),
]
CHAIN_PATTERNS = [
    (0x00, 0x00, 0x00), (0x7A, 0x00, 0x00), (0x7A, 0x33, 0x00), (0x7A, 0x33, 0xC4),
]


def uninit_input(chain=(0, 0, 0), tail=(0, 0, 0), magic=False):
    b = bytearray(8)
    if magic:
        b[0], b[1] = 0x4D, 0xCE
    b[2], b[3], b[4] = chain
    b[5], b[6], b[7] = tail
    return bytes(b)


def uninit_trunk_seeds():
    """Initial corpus spanning the benign tail paths plus the solved
    comparison chain (no format magic anywhere)."""
    seeds = [uninit_input(tail=t) for t in TAIL_PATTERNS]
    seeds.append(uninit_input(chain=CHAIN_PATTERNS[3]))
    seeds.append(uninit_input(chain=CHAIN_PATTERNS[1]))
    return seeds


def uninit_fairness_seeds():
    """Trunk variety plus one magic-format seed so both targets are covered
    from the start."""
    seeds = [uninit_input(tail=t) for t in TAIL_PATTERNS]
    seeds += [uninit_input(chain=CHAIN_PATTERNS[1], tail=t) for t in TAIL_PATTERNS[:4]]
    seeds += [uninit_input(chain=CHAIN_PATTERNS[2], tail=t) for t in TAIL_PATTERNS[:4]]
    seeds += [uninit_input(chain=CHAIN_PATTERNS[3], tail=t) for t in TAIL_PATTERNS[:3]]
    seeds.append(uninit_input(magic=True))
    return seeds


# grouped-targets fixture ----------------------------------------------------

def grouped_program(groups=10, per_group=10):
    """Many targets that co-occur in groups: byte 0 selects a group, the
    group's target blocks run as a straight line, then a shared guarded
    tree supplies path variety common to all groups."""
    blocks = []
    edges = []
    guards = {}
    targets = {}
    heads = [f"g{i:02d}_t0" for i in range(groups)]
    sels = [f"sel_{i}" for i in range(groups - 1)]
    blocks += sels
    for i in range(groups):
        line = [f"g{i:02d}_t{j}" for j in range(per_group)]
        blocks += line
        for a, b in zip(line, line[1:]):
            edges.append(cf(a, b))
        edges.append(cf(line[-1], "dv_root"))
        for j, b in enumerate(line):
            targets[f"grp{i:02d}.c:{j}"] = [b]
    for i, sel in enumerate(sels):
        nxt = sels[i + 1] if i + 1 < len(sels) else heads[-1]
        edges.append(cf(sel, heads[i]))
        edges.append(cf(sel, nxt))
        guards[sel] = {"offset": 0, "op": "range", "lo": i * 25, "hi": i * 25 + 24,
                       "then": heads[i], "else": nxt}
    tree = [
        ("dv_root", 1, 0x40, "dv_a", "dv_b"),
        ("dv_a", 2, 0x55, "dv_aa", "dv_ab"),
        ("dv_b", 2, 0x66, "dv_ba", "dv_bb"),
        ("dv_aa", 3, 0x77, "dv_end0", "dv_end1"),
        ("dv_ab", 3, 0x77, "dv_end2", "dv_end3"),
        ("dv_ba", 3, 0x77, "dv_end4", "dv_end5"),
        ("dv_bb", 3, 0x77, "dv_end6", "dv_end7"),
    ]
    for name, off, val, then, els in tree:
        blocks += [name] if name not in blocks else []
        for leg in (then, els):
            if leg not in blocks:
                blocks.append(leg)
        edges.append(cf(name, then))
        edges.append(cf(name, els))
        guards[name] = {"offset": off, "op": "==", "value": val,
                        "then": then, "else": els}
    doc = {
        "name": "grouped_targets",
        "entry": sels[0],
        "blocks": blocks,
        "edges": edges,
        "guards": guards,
        "targets": targets,
    }
    return parse_program(doc)


def grouped_seeds(groups=10):
    return [bytes([i * 25, 0, 0, 0]) for i in range(groups)]


@pytest.fixture
def rng():
    return random.Random(0xC0FFEE)
