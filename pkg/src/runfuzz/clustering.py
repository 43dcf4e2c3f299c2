"""Target clusters: one virgin map per group of targets, merged by rule mining.

Each covered target starts in its own cluster.  Every stored seed reports
which maps it updated together (its TraceUpdateData); those co-update sets
feed 1- and 2-itemset support counts.  When the rule "an update in cluster a
implies the same update in cluster b" has enough support and confidence, a
is merged into b so one map serves both target groups.

The primary cluster (id 0) is the global coverage map.  It is never merged
away, but other clusters may be absorbed into it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .coverage import TraceUpdateData, VirginMap

log = logging.getLogger(__name__)

PRIMARY_CLUSTER = 0


class DuplicateClusterError(ValueError):
    """A cluster already exists for the target."""


@dataclass
class Cluster:
    id: int
    targets: set[str]
    virgin: VirginMap
    top_rated: dict  # bit index -> seed, managed by the scheduler
    is_primary: bool = False


class SupportCounts:
    """1- and 2-itemset support counts over cluster co-update sets."""

    __slots__ = ("singles", "pairs")

    def __init__(self):
        self.singles: dict[int, float] = {}
        self.pairs: dict[tuple[int, int], float] = {}

    def single(self, a: int) -> float:
        return self.singles.get(a, 0.0)

    def pair(self, a: int, b: int) -> float:
        return self.pairs.get((a, b) if a < b else (b, a), 0.0)


def update_support_counts(data: TraceUpdateData, counts: SupportCounts) -> None:
    """Credit each itemset 1/len(data) so one seed contributes unit mass."""
    if not data:
        raise ValueError("update_support_counts needs a non-empty update record")
    share = 1.0 / len(data)
    for items in data:
        members = sorted(items)
        for i in members:
            counts.singles[i] = counts.singles.get(i, 0.0) + share
        for ai in range(len(members)):
            for bi in range(ai + 1, len(members)):
                key = (members[ai], members[bi])
                counts.pairs[key] = counts.pairs.get(key, 0.0) + share


class ClusterManager:
    """Owns the cluster partition, the per-cluster maps, and merge decisions."""

    def __init__(
        self,
        map_bytes: int,
        support_threshold: float = 500.0,
        confidence_threshold: float = 1.0,
        merges_enabled: bool = True,
    ):
        if support_threshold <= 0 or not (0.0 < confidence_threshold <= 1.0):
            raise ValueError("bad clustering thresholds")
        self.map_bytes = map_bytes
        self.support_threshold = support_threshold
        self.confidence_threshold = confidence_threshold
        self.merges_enabled = merges_enabled
        primary = Cluster(PRIMARY_CLUSTER, set(), VirginMap(map_bytes), {}, True)
        self.clusters: dict[int, Cluster] = {PRIMARY_CLUSTER: primary}
        self._by_target: dict[str, int] = {}
        self._next_id = 1
        self.counts = SupportCounts()
        # bumped on create/merge so callers can invalidate cached selections
        self.version = 0

    @property
    def primary(self) -> Cluster:
        return self.clusters[PRIMARY_CLUSTER]

    def target_cluster_count(self) -> int:
        return len(self.clusters) - 1

    def get_cluster(self, target: str) -> int:
        return self._by_target[target]

    def clusters_for_execution(self, covered_targets) -> tuple[int, ...]:
        """Primary plus the clusters of the given covered targets, ascending."""
        ids = {PRIMARY_CLUSTER}
        for t in covered_targets:
            ids.add(self._by_target[t])
        return tuple(sorted(ids))

    def create_cluster(self, target: str) -> Cluster:
        if target in self._by_target:
            raise DuplicateClusterError(f"target {target!r} already has a cluster")
        cluster = Cluster(self._next_id, {target}, VirginMap(self.map_bytes), {})
        self.clusters[cluster.id] = cluster
        self._by_target[target] = cluster.id
        self._next_id += 1
        self.version += 1
        return cluster

    def record_seed(self, data: TraceUpdateData) -> list[tuple[int, int]]:
        """Account one stored seed's co-update sets, then try merging."""
        update_support_counts(data, self.counts)
        if not self.merges_enabled:
            return []
        return self.try_merge_clusters()

    def try_merge_clusters(self) -> list[tuple[int, int]]:
        """Merge every cluster whose updates are implied by another's.

        A rule a=>b fires when the pair support strictly exceeds the support
        threshold and pair/sigma(a) reaches the confidence threshold.  The
        primary cluster may absorb others but is never a merge source.
        Scanning is in sorted key order and restarts after every merge, so
        the outcome is a deterministic function of the accumulated counts.
        """
        merges: list[tuple[int, int]] = []
        while True:
            fired = False
            for key in sorted(self.counts.pairs):
                pair_count = self.counts.pairs[key]
                if pair_count <= self.support_threshold:
                    continue
                for src, dst in (key, key[::-1]):
                    if src == PRIMARY_CLUSTER:
                        continue
                    if src not in self.clusters or dst not in self.clusters:
                        continue
                    single = self.counts.singles.get(src, 0.0)
                    if single <= 0.0:
                        continue
                    if pair_count / single >= self.confidence_threshold:
                        self._merge(src, dst)
                        merges.append((src, dst))
                        fired = True
                        break
                if fired:
                    break
            if not fired:
                return merges

    def _merge(self, src: int, dst: int) -> None:
        a = self.clusters.pop(src)
        b = self.clusters[dst]
        b.targets.update(a.targets)
        for t in a.targets:
            self._by_target[t] = dst
        # AND keeps a bit virgin only where both maps are virgin, i.e. the
        # merged map records the union of both clusters' coverage
        b.virgin.bits &= a.virgin.bits
        # absorb the source's single count; pair evidence involving the
        # retired id is dropped so pair <= single stays true
        self.counts.singles[dst] = self.counts.singles.get(dst, 0.0) + \
            self.counts.singles.pop(src, 0.0)
        for key in [k for k in self.counts.pairs if src in k]:
            del self.counts.pairs[key]
        self.version += 1
        log.debug("merged cluster %d into %d", src, dst)
