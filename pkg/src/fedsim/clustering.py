"""Clustered training: scheduled similarity splits and prior clusters.

The similarity route follows the recursive-bipartition scheme driven by the
cosine-similarity matrix of local updates, with splits fired at configured
rounds instead of norm-based criteria. The prior route builds the clusters
from labels known up front and federated-finetunes each one.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .aggregation import fedavg_step
from .errors import ClusteringError, ZeroNormError
from .params import ParamVector, UpdateSet, cosine_similarity

MAX_EXHAUSTIVE = 24


@dataclass(frozen=True)
class Cluster:
    cluster_id: int
    members: tuple[int, ...]
    params: ParamVector

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(sorted(int(m) for m in self.members)))
        if not self.members:
            raise ClusteringError(f"cluster {self.cluster_id} has no members")


@dataclass(frozen=True)
class ClusterState:
    """Disjoint clusters covering the client set, plus the split schedule."""

    clusters: tuple[Cluster, ...]
    split_schedule: Mapping[int, tuple[int, ...]] = field(default_factory=dict)
    provenance: str = "similarity"
    next_cluster_id: int = 1
    finetune_rounds: int = 0

    def __post_init__(self):
        seen: set[int] = set()
        for c in self.clusters:
            overlap = seen & set(c.members)
            if overlap:
                raise ClusteringError(f"clients {sorted(overlap)} in two clusters")
            seen |= set(c.members)

    @property
    def member_sets(self) -> dict[int, tuple[int, ...]]:
        return {c.cluster_id: c.members for c in self.clusters}

    def cluster_of(self, client_id: int) -> Cluster:
        for c in self.clusters:
            if client_id in c.members:
                return c
        raise ClusteringError(f"client {client_id} not in any cluster")


def initial_cluster_state(members: Sequence[int], params: ParamVector,
                          split_schedule: Mapping[int, Sequence[int]] | None = None,
                          ) -> ClusterState:
    schedule = {int(r): tuple(ids) for r, ids in (split_schedule or {}).items()}
    root = Cluster(cluster_id=0, members=tuple(members), params=params)
    return ClusterState(clusters=(root,), split_schedule=schedule,
                        provenance="similarity", next_cluster_id=1)


def cluster_weights(members: Sequence[int], sizes: Mapping[int, int]) -> list[float]:
    """n_k renormalized over the cluster's members."""
    total = sum(sizes[m] for m in members)
    if total <= 0:
        raise ClusteringError("cluster has no samples")
    return [sizes[m] / total for m in sorted(members)]


def similarity_matrix(u: UpdateSet) -> np.ndarray:
    """Pairwise cosine similarities of the updates; unit diagonal."""
    if len(u) < 2:
        raise ClusteringError("similarity matrix needs at least two members")
    k = len(u)
    mat = np.eye(k)
    for i in range(k):
        if np.linalg.norm(u.updates[i].delta.values) == 0.0:
            raise ZeroNormError(
                f"client {u.updates[i].client_id} sent a zero update",
                client_id=u.updates[i].client_id)
    for i in range(k):
        for j in range(i + 1, k):
            mat[i, j] = mat[j, i] = cosine_similarity(
                u.updates[i].delta, u.updates[j].delta)
    return mat


def _popcount(arr: np.ndarray) -> np.ndarray:
    out = np.zeros_like(arr)
    tmp = arr.copy()
    while tmp.any():
        out += tmp & 1
        tmp >>= 1
    return out


def optimal_bipartition(matrix: np.ndarray, members: Sequence[int],
                        ) -> tuple[tuple[int, ...], tuple[int, ...], float]:
    """Bipartition minimizing the maximum cross-cluster similarity.

    Exhaustive over the 2^(m-1) - 1 nontrivial bipartitions (m <= 24). Ties
    break toward the smaller first side, then lexicographically smaller
    member ids. Returns (c1, c2, max_cross_similarity).
    """
    members = tuple(sorted(int(m) for m in members))
    m = len(members)
    if m < 2:
        raise ClusteringError("cannot bipartition fewer than two members")
    if m > MAX_EXHAUSTIVE:
        raise ClusteringError(
            f"{m} members exceed the exhaustive bound of {MAX_EXHAUSTIVE}; "
            "split the cluster with prior knowledge first")
    a = np.asarray(matrix, dtype=np.float64)
    if a.shape != (m, m):
        raise ClusteringError(f"similarity matrix shape {a.shape} != ({m},{m})")

    # member 0 is pinned to side A; mask bit i-1 moves member i to side B.
    # mask 0 (empty B) is the only trivial split, so valid masks are
    # 1 .. 2^(m-1) - 1, which is exactly the 2^(m-1) - 1 candidates.
    n_masks = 1 << (m - 1)
    masks = np.arange(1, n_masks, dtype=np.int64)
    cross_max = np.full(masks.shape[0], -np.inf)
    sides = [(masks >> (i - 1)) & 1 if i else np.zeros_like(masks)
             for i in range(m)]
    for i in range(m):
        for j in range(i + 1, m):
            differ = sides[i] != sides[j]
            np.maximum(cross_max, np.where(differ, a[i, j], -np.inf),
                       out=cross_max)
    best_val = cross_max.min()
    ties = np.flatnonzero(cross_max == best_val)

    # tie-break: canonicalize each candidate, prefer smaller |c1| then lex ids
    sizes_b = _popcount(masks[ties])
    sizes_a = m - sizes_b
    c1_size = np.minimum(sizes_a, sizes_b)
    ties = ties[c1_size == c1_size.min()]

    def canonical(mask: int):
        side_a = [members[0]] + [members[i] for i in range(1, m)
                                 if not (mask >> (i - 1)) & 1]
        side_b = [members[i] for i in range(1, m) if (mask >> (i - 1)) & 1]
        if (len(side_a), tuple(side_a)) <= (len(side_b), tuple(side_b)):
            return tuple(side_a), tuple(side_b)
        return tuple(side_b), tuple(side_a)

    best = min(canonical(int(masks[t])) for t in ties)
    return best[0], best[1], float(best_val)


def scheduled_cfl_round(state: ClusterState, round_index: int,
                        updates_by_cluster: Mapping[int, UpdateSet],
                        ) -> tuple[ClusterState, list[dict]]:
    """One clustered round: per-cluster FedAvg, then any scheduled splits.

    Children of a split inherit the parent's freshly aggregated parameters.
    Returns the new state and one diagnostic record per split (including the
    norm-based gap statistic sqrt((1 - max_cross)/2), reported, not gated on).
    """
    scheduled = state.split_schedule.get(int(round_index), ())
    known = {c.cluster_id for c in state.clusters}
    unknown = [cid for cid in scheduled if cid not in known]
    if unknown:
        raise ClusteringError(
            f"round {round_index} schedules unknown clusters {unknown}")

    aggregated: list[Cluster] = []
    for c in state.clusters:
        u = updates_by_cluster.get(c.cluster_id)
        if u is None:
            raise ClusteringError(f"no updates for cluster {c.cluster_id}")
        if set(u.client_ids) != set(c.members):
            raise ClusteringError(
                f"cluster {c.cluster_id}: updates from {u.client_ids} but "
                f"members are {c.members}")
        aggregated.append(replace(c, params=fedavg_step(c.params, u)))

    diagnostics: list[dict] = []
    next_id = state.next_cluster_id
    final: list[Cluster] = []
    for c in aggregated:
        if c.cluster_id not in scheduled:
            final.append(c)
            continue
        if len(c.members) < 2:
            raise ClusteringError(
                f"round {round_index}: cannot split singleton cluster "
                f"{c.cluster_id}")
        u = updates_by_cluster[c.cluster_id]
        mat = similarity_matrix(u)
        c1, c2, max_cross = optimal_bipartition(mat, u.client_ids)
        gap = float(np.sqrt(max(0.0, (1.0 - max_cross) / 2.0)))
        diagnostics.append({
            "round": int(round_index), "parent": c.cluster_id,
            "children": [next_id, next_id + 1],
            "members": [list(c1), list(c2)],
            "max_cross_similarity": max_cross,
            "norm_gap_statistic": gap,
        })
        final.append(Cluster(next_id, c1, c.params))
        final.append(Cluster(next_id + 1, c2, c.params))
        next_id += 2
    new_state = replace(state, clusters=tuple(final), next_cluster_id=next_id)
    return new_state, diagnostics


def prior_clusters(assignment: Mapping[int, str], w_start: ParamVector,
                   finetune_rounds: int) -> ClusterState:
    """Build clusters from prior labels; every cluster starts at ``w_start``.

    The returned state carries ``finetune_rounds`` for the orchestration
    layer, which runs that many weighted-FedAvg rounds per cluster with
    weights renormalized inside each cluster.
    """
    by_label: dict[str, list[int]] = {}
    for client_id, label in assignment.items():
        if label is None or str(label) == "":
            raise ClusteringError(f"client {client_id} has an empty cluster label")
        by_label.setdefault(str(label), []).append(int(client_id))
    clusters = tuple(
        Cluster(cluster_id=i, members=tuple(sorted(ids)), params=w_start)
        for i, (label, ids) in enumerate(sorted(by_label.items())))
    return ClusterState(clusters=clusters, split_schedule={},
                        provenance="prior", next_cluster_id=len(clusters),
                        finetune_rounds=int(finetune_rounds))
