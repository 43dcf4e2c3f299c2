"""Campaign loop: corpus management, favored selection, cycles, persistence.

A cycle assigns the whole budget across the corpus up front, then fuzzes
seeds in descending energy order.  Stored test cases update the virgin
maps, clusters, covered blocks, and critical sets; if a stored seed moves
any critical set the cycle aborts immediately so the next cycle can
re-assign energy against the new frontier.
"""

from __future__ import annotations

import json
import logging
import random
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import energy as energy_mod
from .clustering import PRIMARY_CLUSTER, ClusterManager
from .coverage import ExecutionTrace, VirginBlockMap, has_new_bits
from .critical import CriticalState, refresh_on_coverage
from .harness import MutationEngine, SimProgram
from .icfg import compute_distances, map_target_weights

log = logging.getLogger(__name__)

FLAG_COV = "cov"
FLAG_DIV = "div"


@dataclass
class CampaignConfig:
    rng_seed: int = 0
    max_execs: int | None = None
    max_seconds: float | None = None
    max_cycles: int | None = None
    k: float = 1.0
    epsilon: float = 0.1
    support_threshold: float = 500.0
    confidence_threshold: float = 1.0
    execs_per_seed_baseline: int = 512
    step_limit: int = 100_000
    max_input_len: int = 4096
    no_diversity: bool = False
    afl_energy: bool = False
    no_cluster: bool = False
    stop_on_crash: bool = False
    renormalize_subratio: bool = True

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(eq=False)  # identity semantics: seeds are unique corpus entries
class SeedEntry:
    id: int
    data: bytes
    trace_summary: bytes  # classified bitmap
    trace_int: int
    bit_positions: tuple[int, ...]
    covered_blocks: int  # dense bitmap
    covered_targets: tuple[str, ...]
    exec_time: int  # simulator steps
    flags: frozenset[str]
    source_id: int | None = None
    favored: bool = False
    cumulative_energy: float = 0.0
    mutation_count: int = 0

    def fav_metric(self) -> tuple[int, int]:
        return (self.exec_time * len(self.data), self.id)

    def filename(self) -> str:
        parts = [f"id:{self.id:06d}"]
        if self.source_id is not None:
            parts.append(f"src:{self.source_id:06d}")
        if self.flags:
            parts.append("flags:" + "+".join(sorted(self.flags)))
        return ",".join(parts)


def update_top_rated(seed: SeedEntry, arrays) -> bool:
    """Challenge every bit the seed covers in each selected top-rated array.

    The holder of a bit is the covering seed minimizing exec_time * length
    (ties to the lower id).  Returns whether any slot changed hands.
    """
    changed = False
    metric = seed.fav_metric()
    for array in arrays:
        for pos in seed.bit_positions:
            cur = array.get(pos)
            if cur is None or metric < cur.fav_metric():
                array[pos] = seed
                changed = True
    return changed


def cull_queue(array: dict[int, SeedEntry]) -> set[SeedEntry]:
    """Greedy set cover over one top-rated array, scanning bits in order."""
    favored: set[SeedEntry] = set()
    covered: set[int] = set()
    for pos in sorted(array):
        if pos in covered:
            continue
        holder = array[pos]
        favored.add(holder)
        covered.update(holder.bit_positions)
    return favored


def select_favored(arrays) -> set[SeedEntry]:
    """Union of per-array culling; every holder set contributes."""
    favored: set[SeedEntry] = set()
    for array in arrays:
        favored |= cull_queue(array)
    return favored


@dataclass
class CycleReport:
    index: int
    executed: int = 0
    stored: list[int] = field(default_factory=list)
    crashes: int = 0
    aborted: bool = False
    plan: list[tuple[int, int]] = field(default_factory=list)  # (seed id, execs)
    ratio: dict[int, float] = field(default_factory=dict)
    allocation: dict[int, float] = field(default_factory=dict)


class CampaignError(RuntimeError):
    pass


class Campaign:
    """One fuzzing campaign over a simulated program."""

    def __init__(self, program: SimProgram, config: CampaignConfig,
                 out_dir: Path | str | None = None):
        self.program = program
        self.cfg = config
        self.rng = random.Random(config.rng_seed)
        self.engine = MutationEngine(config.max_input_len)

        self.target_weights = map_target_weights(program.target_spec)
        self.targets = tuple(sorted(self.target_weights))
        self.distances = compute_distances(program.icfg, self.targets)

        n_map = program.map_bytes
        self.clusters = ClusterManager(
            n_map,
            support_threshold=config.support_threshold,
            confidence_threshold=config.confidence_threshold,
            merges_enabled=not config.no_cluster,
        )
        self.virgin_blocks = VirginBlockMap(len(program.dense_order))
        self.critical = CriticalState(targets=self.targets)
        self.critical.recompute(program.icfg)

        self.corpus: list[SeedEntry] = []
        self.crashes: list[dict] = []
        self._crash_keys: set[str] = set()
        self._cull_pending = False

        self.total_execs = 0
        self.cycle_index = 0
        self.target_energy = {t: 0.0 for t in self.targets}
        self.stats_records: list[dict] = []

        self._sel_cache: dict[int, tuple] = {}
        self._sel_version = -1

        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            (self.out_dir / "corpus").mkdir(parents=True, exist_ok=True)
            (self.out_dir / "crashes").mkdir(parents=True, exist_ok=True)

    # corpus ---------------------------------------------------------------

    def import_seeds(self, inputs) -> int:
        """Run and store the initial inputs; duplicates are dropped."""
        stored = 0
        for data in inputs:
            data = bytes(data[: self.cfg.max_input_len])
            counters, executed, crash_idx, steps, hung = self.program.run(
                data, self.cfg.step_limit)
            if crash_idx >= 0:
                log.warning("initial seed crashes; archived, not imported")
                self._archive_crash(data, None, crash_idx)
                continue
            if hung:
                log.warning("initial seed exceeds the step limit; skipped")
                continue
            ok, _ = self._try_store(data, counters, executed, steps, None)
            if ok:
                stored += 1
            else:
                log.warning("initial seed adds no new coverage; skipped")
        if not self.corpus:
            raise CampaignError("no usable initial seeds")
        return stored

    # map selection ---------------------------------------------------------

    def _selection(self, executed_mask: int):
        """Clusters to compare against for this execution, cached by the
        covered-target mask."""
        if self._sel_version != self.clusters.version:
            self._sel_cache.clear()
            self._sel_version = self.clusters.version
        tmask = executed_mask & self.program.target_mask
        sel = self._sel_cache.get(tmask)
        if sel is None:
            names = self.program.covered_targets(executed_mask)
            if self.cfg.no_diversity:
                cids = (PRIMARY_CLUSTER,)
            else:
                known = [t for t in names if t in self.clusters._by_target]
                cids = self.clusters.clusters_for_execution(known)
            maps = tuple(self.clusters.clusters[c].virgin for c in cids)
            sel = (cids, maps, names)
            self._sel_cache[tmask] = sel
        return sel

    # storing ---------------------------------------------------------------

    def _try_store(self, data: bytes, counters, executed_mask: int, steps: int,
                   source: SeedEntry | None):
        """Multi-map novelty check; on novelty, store and update everything.

        Returns (stored, critical_changed).
        """
        trace = ExecutionTrace(counters)
        t_int = trace.as_int
        cids, maps, target_names = self._selection(executed_mask)
        fresh = False
        for vm in maps:
            if t_int & vm.bits:
                fresh = True
                break
        if not fresh:
            return False, False

        stored, data_sets = has_new_bits(trace, list(zip(cids, maps)))
        if not stored:  # pragma: no cover - the quick check above is exact
            return False, False

        members = data_sets.members()
        flags = set()
        if PRIMARY_CLUSTER in members:
            flags.add(FLAG_COV)
        if members - {PRIMARY_CLUSTER}:
            flags.add(FLAG_DIV)

        seed = SeedEntry(
            id=len(self.corpus),
            data=data,
            trace_summary=trace.classified,
            trace_int=t_int,
            bit_positions=trace.bit_positions(),
            covered_blocks=self.program.dense_covered_mask(executed_mask),
            covered_targets=target_names,
            exec_time=steps,
            flags=frozenset(flags),
            source_id=None if source is None else source.id,
        )
        self.corpus.append(seed)
        self._persist_seed(seed)

        if not self.cfg.no_diversity:
            self.clusters.record_seed(data_sets)

        new_dense = self.virgin_blocks.update(seed.covered_blocks)
        new_names = [self.program.dense_order[i] for i in new_dense]
        critical_changed = refresh_on_coverage(new_names, self.critical,
                                               self.program.icfg)

        if not self.cfg.no_diversity:
            for t in new_names:
                if t in self.target_weights and t not in self.clusters._by_target:
                    cluster = self.clusters.create_cluster(t)
                    # the creating seed's own path is already part of this
                    # target's diversity record
                    cluster.virgin.bits &= ~t_int

        # enter the seed into the top-rated arrays of its clusters
        if self.cfg.no_diversity:
            arrays = [self.clusters.primary.top_rated]
        else:
            known = [t for t in target_names if t in self.clusters._by_target]
            arrays = [self.clusters.clusters[c].top_rated
                      for c in self.clusters.clusters_for_execution(known)]
        if update_top_rated(seed, arrays):
            self._cull_pending = True
        return True, critical_changed

    def _persist_seed(self, seed: SeedEntry) -> None:
        if self.out_dir is None:
            return
        path = self.out_dir / "corpus" / seed.filename()
        try:
            path.write_bytes(seed.data)
        except OSError as exc:
            raise CampaignError(f"cannot persist seed {seed.id}: {exc}") from exc

    def _archive_crash(self, data: bytes, source: SeedEntry | None,
                       crash_idx: int) -> bool:
        block = self.program.icfg.blocks[crash_idx]
        if block in self._crash_keys:
            return False
        self._crash_keys.add(block)
        record = {
            "id": len(self.crashes),
            "src": None if source is None else source.id,
            "block": block,
            "source_flags": sorted(source.flags) if source is not None else [],
        }
        self.crashes.append(record)
        if self.out_dir is not None:
            parts = [f"id:{record['id']:06d}"]
            if record["src"] is not None:
                parts.append(f"src:{record['src']:06d}")
            path = self.out_dir / "crashes" / ",".join(parts)
            try:
                path.write_bytes(data)
            except OSError as exc:
                raise CampaignError(f"cannot archive crash: {exc}") from exc
        return True

    # favored / energy ------------------------------------------------------

    def _refresh_favored(self) -> None:
        arrays = [c.top_rated for _, c in sorted(self.clusters.clusters.items())]
        favored = select_favored(arrays)
        for s in self.corpus:
            s.favored = s in favored
        self._cull_pending = False

    def _assign_energy(self, budget: int):
        """Desired ratio + integer per-seed allocation for one cycle."""
        corpus = self.corpus
        n = len(corpus)
        avg_time = sum(s.exec_time for s in corpus) / n
        avg_bits = sum(len(s.bit_positions) for s in corpus) / n
        scores = {
            s.id: energy_mod.score_seed(s.exec_time, len(s.bit_positions),
                                        avg_time, avg_bits)
            for s in corpus
        }
        favored_ids = {s.id for s in corpus if s.favored}

        if self.cfg.afl_energy:
            raw = {
                s.id: scores[s.id] * (1.0 if s.favored else energy_mod.UNFAVORED_FACTOR)
                for s in corpus
            }
            total = sum(raw.values())
            ratio = {i: v / total for i, v in raw.items()}
            x = [budget * ratio[s.id] for s in corpus]
        else:
            block_cols = energy_mod.build_block_matrix(
                dict(self.critical.per_target), self.distances, self.cfg.k)
            blocks = sorted({b for col in block_cols.values() for b in col})
            dense = self.program.dense_index
            coverage = {}
            for s in corpus:
                coverage[s.id] = {
                    b for b in blocks if (s.covered_blocks >> dense[b]) & 1
                }
            seed_cols = energy_mod.build_seed_matrix(
                blocks, [s.id for s in corpus], favored_ids, coverage, scores)
            ratio = energy_mod.compute_seed_ratio(
                block_cols, seed_cols, self.target_weights, self.cfg.epsilon,
                scores)
            x = energy_mod.approach_ratio(
                budget,
                [s.cumulative_energy for s in corpus],
                [ratio[s.id] for s in corpus],
                renormalize=self.cfg.renormalize_subratio,
            )
        ints = energy_mod.allocate_integer_energy(x, budget)
        plan = sorted(zip(corpus, ints), key=lambda p: (-p[1], p[0].id))
        allocation = {s.id: xi for s, xi in zip(corpus, x)}
        return plan, ratio, allocation

    # cycle -----------------------------------------------------------------

    def run_cycle(self, budget: int, deadline: float | None = None) -> CycleReport:
        report = CycleReport(index=self.cycle_index)
        self.cycle_index += 1
        if budget <= 0 or not self.corpus:
            self._emit_stats(report)
            return report
        if self._cull_pending:
            self._refresh_favored()
        plan, report.ratio, report.allocation = self._assign_energy(budget)
        report.plan = [(s.id, n) for s, n in plan]

        cfg = self.cfg
        prog_run = self.program.run
        step_limit = cfg.step_limit
        rng = self.rng
        mutate = self.engine.mutate
        cycle_energy: dict[int, int] = {}

        for seed, n_execs in plan:
            if n_execs <= 0:
                continue
            spent = 0
            seed_data = seed.data
            for _ in range(n_execs):
                data = mutate(seed_data, seed.mutation_count, rng)
                seed.mutation_count += 1
                counters, executed, crash_idx, steps, hung = prog_run(data, step_limit)
                spent += 1
                if crash_idx >= 0:
                    if self._archive_crash(data, seed, crash_idx):
                        report.crashes += 1
                    if cfg.stop_on_crash:
                        report.aborted = True
                        break
                    continue
                if hung:
                    continue
                stored, crit_changed = self._try_store(
                    data, counters, executed, steps, seed)
                if stored:
                    report.stored.append(self.corpus[-1].id)
                    if crit_changed:
                        report.aborted = True
                        break
            seed.cumulative_energy += spent
            cycle_energy[seed.id] = spent
            report.executed += spent
            if report.aborted:
                break
            if deadline is not None and time.monotonic() >= deadline:
                break
            if cfg.stop_on_crash and self.crashes:
                break
            if cfg.max_execs is not None and \
                    self.total_execs + report.executed >= cfg.max_execs:
                break

        self.total_execs += report.executed
        by_id = {s.id: s for s in self.corpus}
        for sid, spent in cycle_energy.items():
            for t in by_id[sid].covered_targets:
                self.target_energy[t] += spent
        self._emit_stats(report)
        return report

    def cycle_budget(self) -> int:
        return self.cfg.execs_per_seed_baseline * len(self.corpus)

    def run(self) -> dict:
        """Run cycles until an exec, wall-time, or cycle budget is reached."""
        cfg = self.cfg
        if cfg.max_execs is None and cfg.max_seconds is None \
                and cfg.max_cycles is None:
            raise CampaignError("campaign has no budget limit")
        deadline = None
        if cfg.max_seconds is not None:
            deadline = time.monotonic() + cfg.max_seconds
        cycles = 0
        while True:
            if cfg.max_cycles is not None and cycles >= cfg.max_cycles:
                break
            if deadline is not None and time.monotonic() >= deadline:
                break
            if cfg.stop_on_crash and self.crashes:
                break
            budget = self.cycle_budget()
            if cfg.max_execs is not None:
                budget = min(budget, cfg.max_execs - self.total_execs)
                if budget <= 0:
                    break
            self.run_cycle(budget, deadline)
            cycles += 1
        return self.summary()

    def summary(self) -> dict:
        return {
            "cycles": self.cycle_index,
            "execs": self.total_execs,
            "corpus": len(self.corpus),
            "crashes": len(self.crashes),
            "coverage_bits": self.clusters.primary.virgin.covered_bit_count(),
            "clusters": self.clusters.target_cluster_count(),
            "target_energy": dict(self.target_energy),
        }

    # stats ------------------------------------------------------------------

    def target_diversity(self) -> dict[str, int]:
        """Bits covered by the seeds hitting each target."""
        out = {}
        for t in self.targets:
            acc = 0
            for s in self.corpus:
                if t in s.covered_targets:
                    acc |= s.trace_int
            out[t] = acc.bit_count()
        return out

    def _emit_stats(self, report: CycleReport) -> None:
        record = {
            "cycle": report.index,
            "execs": self.total_execs,
            "corpus": len(self.corpus),
            "coverage_bits": self.clusters.primary.virgin.covered_bit_count(),
            "covered_blocks": self.virgin_blocks.covered_count(),
            "clusters": self.clusters.target_cluster_count(),
            "crashes": len(self.crashes),
            "aborted": report.aborted,
            "target_energy": {t: self.target_energy[t] for t in self.targets},
            "target_diversity": self.target_diversity(),
            "seeds": {
                str(sid): {
                    "r": report.ratio.get(sid, 0.0),
                    "x": report.allocation.get(sid, 0.0),
                    "b": next(s.cumulative_energy for s in self.corpus
                              if s.id == sid),
                }
                for sid, _ in report.plan
            },
        }
        self.stats_records.append(record)
        if self.out_dir is not None:
            with open(self.out_dir / "stats.jsonl", "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def write_setup(self, extra: dict | None = None) -> None:
        if self.out_dir is None:
            return
        doc = {"program": self.program.name, "config": self.cfg.as_dict()}
        if extra:
            doc.update(extra)
        (self.out_dir / "fuzzer_setup").write_text(
            json.dumps(doc, sort_keys=True, indent=2) + "\n")
