"""Corpus-level energy assignment.

Each target carries a weight (uniform by default).  The weight flows to the
target's critical blocks, inversely scaled by block-to-target distance, and
from each block to the seeds covering it, scaled by the seeds' scores with
a heavy discount for unfavored seeds.  The resulting per-seed ratio is what
the next cycle's energy should make the cumulative assignment look like;
``approach_ratio`` solves that allocation exactly.

Matrices are kept as sparse column dicts; tests check them against the
dense definition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .icfg import DistanceTable

UNFAVORED_FACTOR = 0.05


class EnergyError(ValueError):
    pass


def score_seed(exec_time: float, trace_bits: int, avg_exec_time: float,
               avg_trace_bits: float) -> float:
    """AFL-flavored per-seed score from execution speed and trace size.

    Faster-than-average seeds score up to 3x, denser traces up to 4x; the
    baseline seed (at corpus averages) scores 100.
    """
    if exec_time <= 0:
        raise EnergyError("exec_time must be positive")
    speed = avg_exec_time / exec_time if avg_exec_time > 0 else 1.0
    speed = min(3.0, max(0.1, speed))
    density = trace_bits / avg_trace_bits if avg_trace_bits > 0 else 1.0
    density = min(4.0, max(0.25, density))
    return 100.0 * speed * density


def build_block_matrix(critical: dict[str, frozenset[str] | set[str]],
                       dist: DistanceTable, k: float) -> dict[str, dict[str, float]]:
    """Column-normalized target->block weight distribution.

    One column per target with a non-empty critical set; the entry for block
    b is 1/(distance(b, target) + k), normalized so the column sums to 1.
    Targets with an empty critical set are dropped from this cycle.
    """
    if k <= 0:
        raise EnergyError("k must be positive")
    columns: dict[str, dict[str, float]] = {}
    for t in sorted(critical):
        blocks = critical[t]
        if not blocks:
            continue
        col: dict[str, float] = {}
        for b in sorted(blocks):
            d = dist.get(b, t)
            if d is None:
                continue
            col[b] = 1.0 / (d + k)
        total = sum(col.values())
        if total <= 0.0:
            continue
        columns[t] = {b: w / total for b, w in col.items()}
    return columns


def build_seed_matrix(blocks, seeds, favored, coverage,
                      scores) -> dict[str, dict[int, float]]:
    """Column-normalized block->seed weight distribution.

    ``coverage`` maps seed id -> set of blocks it covers (restricted to the
    blocks of interest is fine); favored seeds enter at full score, unfavored
    at 5% of it.  Blocks covered by no seed produce no column.
    """
    columns: dict[str, dict[int, float]] = {}
    for b in sorted(blocks):
        col: dict[int, float] = {}
        for s in seeds:
            if b not in coverage[s]:
                continue
            sc = scores[s]
            if sc <= 0:
                raise EnergyError(f"seed {s} has non-positive score")
            col[s] = sc if s in favored else UNFAVORED_FACTOR * sc
        total = sum(col.values())
        if total > 0.0:
            columns[b] = {s: w / total for s, w in col.items()}
    return columns


def compute_seed_ratio(block_columns: dict[str, dict[str, float]],
                       seed_columns: dict[str, dict[int, float]],
                       target_weights: dict[str, float],
                       epsilon: float,
                       scores: dict[int, float]) -> dict[int, float]:
    """Propagate target weights through blocks to seeds; normalize to a ratio.

    A critical block without any covering seed has its share of the target
    column redistributed proportionally over the target's remaining blocks.
    The exploration term spreads epsilon times the total target weight over
    all seeds proportionally to their scores; when no target weight
    propagates at all (no targets, or nothing critical covered yet) the
    ratio degenerates to the pure score distribution.
    """
    if epsilon < 0:
        raise EnergyError("epsilon must be non-negative")
    if not scores:
        raise EnergyError("cannot plan a cycle over an empty corpus")
    weights: dict[int, float] = {s: 0.0 for s in scores}
    for t, col in block_columns.items():
        phi = target_weights.get(t, 0.0)
        if phi <= 0.0:
            continue
        live = {b: w for b, w in col.items() if b in seed_columns}
        live_total = sum(live.values())
        if live_total <= 0.0:
            continue
        for b, w in live.items():
            share = phi * w / live_total
            for s, sw in seed_columns[b].items():
                weights[s] += share * sw
    score_total = sum(scores.values())
    propagated = sum(weights.values())
    if propagated <= 0.0:
        # coverage-guided fallback: no critical block reachable yet
        return {s: scores[s] / score_total for s in scores}
    c_total = epsilon * sum(target_weights.values())
    if c_total > 0.0:
        for s in scores:
            weights[s] += c_total * scores[s] / score_total
    total = sum(weights.values())
    return {s: w / total for s, w in weights.items()}


def approach_ratio(budget: float, assigned, ratio, renormalize: bool = True):
    """Split ``budget`` so cumulative energy best approaches ``ratio``.

    Given past per-seed energy ``assigned`` (b) and a desired distribution
    ``ratio`` (r), returns x >= 0 with sum(x) = budget such that (x + b) is
    as close to proportional-to-r as possible.  Ideal shares below what a
    seed already has are fixed to zero and the remainder is re-solved; with
    ``renormalize`` the surviving ratio entries are rescaled to sum to 1 at
    each round, which is what keeps sum(x) = budget.
    """
    n = len(ratio)
    if len(assigned) != n:
        raise EnergyError("assigned and ratio must have the same length")
    if budget < 0:
        raise EnergyError("budget must be non-negative")
    if any(v < 0 for v in assigned) or any(v < 0 for v in ratio):
        raise EnergyError("assigned and ratio entries must be non-negative")
    x = [0.0] * n
    active = list(range(n))
    while active:
        rsum = sum(ratio[i] for i in active)
        if rsum <= 0.0:
            if budget > 0.0:
                raise EnergyError("ratio mass is zero but budget is positive")
            break
        scale = budget + sum(assigned[i] for i in active)
        if renormalize:
            desired = {i: scale * ratio[i] / rsum for i in active}
        else:
            desired = {i: scale * ratio[i] for i in active}
        removed = [i for i in active if desired[i] < assigned[i]]
        if not removed:
            for i in active:
                x[i] = max(0.0, desired[i] - assigned[i])
            break
        active = [i for i in active if desired[i] >= assigned[i]]
    return x


def allocate_integer_energy(x, total: int) -> list[int]:
    """Round a real allocation to ints summing to ``total`` (largest
    remainder, ties to the lower index)."""
    floors = [int(math.floor(v)) for v in x]
    rem = total - sum(floors)
    if rem < 0:
        # float drift pushed a floor past the budget; trim deterministically
        for i in sorted(range(len(x)), key=lambda i: (-(floors[i]), i)):
            while rem < 0 and floors[i] > 0:
                floors[i] -= 1
                rem += 1
        return floors
    order = sorted(range(len(x)), key=lambda i: (-(x[i] - floors[i]), i))
    pos = 0
    while rem > 0 and order:
        i = order[pos % len(order)]
        floors[i] += 1
        rem -= 1
        pos += 1
    return floors


@dataclass
class EnergyLedger:
    """Cumulative executions actually spent per seed."""

    assigned: list[float] = field(default_factory=list)

    def extend_to(self, n: int) -> None:
        while len(self.assigned) < n:
            self.assigned.append(0.0)

    def add(self, index: int, amount: float) -> None:
        self.assigned[index] += amount

    def total(self) -> float:
        return sum(self.assigned)
