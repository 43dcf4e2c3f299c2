"""Critical blocks: where fuzzing energy should concentrate per target.

For a target the corpus already covers, the critical set is the target
block itself.  For an uncovered target it is the covered frontier: every
covered block with an edge into the region of uncovered blocks that can
still reach the target through uncovered blocks only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .icfg import Icfg


def compute_critical_blocks(target: str, covered, icfg: Icfg) -> set[str]:
    if target not in icfg.block_set:
        return set()
    if target in covered:
        return {target}
    # backward closure of uncovered blocks that reach the target through
    # uncovered blocks only (the target itself included)
    closure = {target}
    work = [target]
    while work:
        v = work.pop()
        for u, _kind in icfg.preds[v]:
            if u not in covered and u not in closure:
                closure.add(u)
                work.append(u)
    boundary: set[str] = set()
    for v in closure:
        for u, _kind in icfg.preds[v]:
            if u in covered:
                boundary.add(u)
    return boundary


@dataclass
class CriticalState:
    """Covered-block set plus the per-target critical sets derived from it."""

    targets: tuple[str, ...]
    covered: set[str] = field(default_factory=set)
    per_target: dict[str, frozenset[str]] = field(default_factory=dict)

    def recompute(self, icfg: Icfg) -> bool:
        changed = False
        for t in self.targets:
            blocks = frozenset(compute_critical_blocks(t, self.covered, icfg))
            if blocks != self.per_target.get(t):
                changed = True
            self.per_target[t] = blocks
        return changed


def refresh_on_coverage(new_blocks, state: CriticalState, icfg: Icfg) -> bool:
    """Fold newly covered blocks into the state; report whether any critical
    set moved (the scheduler aborts its cycle when this returns True)."""
    if not new_blocks:
        return False
    state.covered.update(new_blocks)
    return state.recompute(icfg)
