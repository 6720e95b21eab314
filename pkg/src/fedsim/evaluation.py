"""Segmentation metrics, per-institution aggregation and the fold protocol.

Dice and the 95th-percentile Hausdorff distance operate on binary 3D grids.
Distances are Euclidean nearest-foreground-voxel distances over all
foreground voxels (no surface extraction): exact at desk scale, computed
with a distance transform and cross-checked in the tests against an
all-pairs reference. Cross-validation computes five folds per institution so
every global fold contains one local fold of every client.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from .seeding import FOLDS, rng_from
from .tasks import ClientDataset


@dataclass(frozen=True)
class MaskPair:
    """Binary prediction/ground-truth grids with voxel spacing."""

    prediction: np.ndarray
    ground_truth: np.ndarray
    spacing: tuple[float, ...] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        p = np.asarray(self.prediction).astype(bool)
        g = np.asarray(self.ground_truth).astype(bool)
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
        object.__setattr__(self, "prediction", p)
        object.__setattr__(self, "ground_truth", g)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))


def dice_score(pair: MaskPair) -> float:
    """2|P n G| / (|P| + |G|); empty/empty scores 1, half-empty scores 0."""
    p, g = pair.prediction, pair.ground_truth
    np_, ng = int(p.sum()), int(g.sum())
    if np_ == 0 and ng == 0:
        return 1.0
    if np_ == 0 or ng == 0:
        return 0.0
    inter = int(np.logical_and(p, g).sum())
    return 2.0 * inter / (np_ + ng)


def percentile(values: Sequence[float], q: float = 95.0) -> float:
    """Linear-interpolation percentile: rank q/100 * (n-1) on sorted values."""
    vals = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    if vals.size == 0:
        raise ValueError("percentile of an empty multiset")
    if not 0.0 <= q <= 100.0:
        raise ValueError(f"q must be in [0, 100], got {q}")
    rank = q / 100.0 * (vals.size - 1)
    lo = math.floor(rank)
    hi = min(lo + 1, vals.size - 1)
    frac = rank - lo
    return float(vals[lo] * (1.0 - frac) + vals[hi] * frac)


def hausdorff95(pair: MaskPair) -> float | None:
    """95th percentile of the symmetric nearest-voxel distance multiset.

    Returns None (undefined) when either mask is empty; callers exclude
    undefined values from averages.
    """
    p, g = pair.prediction, pair.ground_truth
    if not p.any() or not g.any():
        return None
    # distance of every voxel to the nearest foreground voxel of the other mask
    dist_to_g = ndimage.distance_transform_edt(~g, sampling=pair.spacing)
    dist_to_p = ndimage.distance_transform_edt(~p, sampling=pair.spacing)
    dists = np.concatenate([dist_to_g[p], dist_to_p[g]])
    return percentile(dists, 95.0)


def local_split_sizes(n_k: int, fold: int, n_folds: int = 5,
                      val_frac: float = 0.2) -> tuple[int, int, int]:
    """(test, val, train) sizes for one client and one fold.

    Fold sizes differ by at most one (larger folds first); the remainder
    splits train/val with the validation count rounded half-up and floored
    at one.
    """
    base, rem = divmod(n_k, n_folds)
    test = base + (1 if fold < rem else 0)
    remaining = n_k - test
    val = max(1, math.floor(val_frac * remaining + 0.5)) if remaining else 0
    return test, val, remaining - val


@dataclass(frozen=True)
class FoldPlan:
    """Per-client fold index sets plus derived train/val/test splits.

    ``folds[client_id][f]`` lists local sample indices of fold f. For global
    fold f the client's test set is its local fold f and the remaining
    samples split 80:20 into train and validation.
    """

    folds: Mapping[int, tuple[tuple[int, ...], ...]]
    n_folds: int
    val_frac: float
    seed: int

    def split(self, client_id: int, fold: int) -> tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]:
        """(train, val, test) local indices for one client and one global fold."""
        local = self.folds[client_id]
        test = local[fold]
        rest = [i for f, part in enumerate(local) if f != fold for i in part]
        n_rest = len(rest)
        val_n = max(1, math.floor(self.val_frac * n_rest + 0.5)) if n_rest else 0
        val = tuple(rest[n_rest - val_n:])
        train = tuple(rest[: n_rest - val_n])
        return train, val, test

    def client_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.folds))


def build_folds(partition: Sequence[ClientDataset], n_folds: int = 5,
                val_frac: float = 0.2, seed: int = 0) -> FoldPlan:
    """Per-client seeded shuffle and contiguous slicing into ``n_folds`` folds."""
    if n_folds < 2:
        raise ValueError("need at least two folds")
    folds: dict[int, tuple[tuple[int, ...], ...]] = {}
    for ds in partition:
        if ds.n_k < 2:
            raise ValueError(
                f"client {ds.client_id}: {ds.n_k} samples cannot form folds "
                "plus a validation split")
        perm = rng_from(seed, FOLDS, ds.client_id).permutation(ds.n_k)
        base, rem = divmod(ds.n_k, n_folds)
        parts = []
        pos = 0
        for f in range(n_folds):
            size = base + (1 if f < rem else 0)
            parts.append(tuple(int(i) for i in perm[pos: pos + size]))
            pos += size
        folds[ds.client_id] = tuple(parts)
    return FoldPlan(folds=folds, n_folds=n_folds, val_frac=val_frac, seed=seed)


@dataclass(frozen=True)
class SampleMetrics:
    """Metric values of one evaluated sample; None marks undefined entries."""

    client_id: int
    sample_index: int
    fold: int
    values: Mapping[str, float | None]


@dataclass(frozen=True)
class MetricStat:
    mean: float
    std: float
    count: int


@dataclass(frozen=True)
class MetricsReport:
    """Sample-basis means/stds overall and per institution."""

    overall: Mapping[str, MetricStat]
    per_institution: Mapping[int, Mapping[str, MetricStat]]
    samples: tuple[SampleMetrics, ...]

    def metric_names(self) -> tuple[str, ...]:
        return tuple(sorted(self.overall))


def _stats(values: list[float]) -> MetricStat:
    arr = np.asarray(values, dtype=np.float64)
    return MetricStat(mean=float(arr.mean()), std=float(arr.std()),
                      count=int(arr.size))


def aggregate_report(per_sample: Sequence[SampleMetrics]) -> MetricsReport:
    """Mean +/- std per metric, overall and per institution.

    Undefined values (None) are excluded from that metric's aggregation but
    leave the sample's other metrics untouched.
    """
    names = sorted({name for sm in per_sample for name in sm.values})
    overall: dict[str, MetricStat] = {}
    per_inst: dict[int, dict[str, MetricStat]] = {}
    for name in names:
        vals = [sm.values[name] for sm in per_sample
                if sm.values.get(name) is not None]
        if vals:
            overall[name] = _stats(vals)
    for client in sorted({sm.client_id for sm in per_sample}):
        rows = [sm for sm in per_sample if sm.client_id == client]
        table: dict[str, MetricStat] = {}
        for name in names:
            vals = [sm.values[name] for sm in rows
                    if sm.values.get(name) is not None]
            if vals:
                table[name] = _stats(vals)
        per_inst[client] = table
    return MetricsReport(overall=overall, per_institution=per_inst,
                         samples=tuple(per_sample))
