"""Synthetic differentiable tasks, their losses/gradients, and partitioners.

The tasks stand in for the out-of-scope segmentation network: small convex
and non-convex models whose gradients are exact and cheap, plus a toy
volumetric task (per-voxel linear classifier + sigmoid under the soft Dice
loss) that exercises the segmentation metrics end to end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .errors import NonFiniteLossError, PartitionError
from .params import ParamVector
from .seeding import PARTITION, POOL, SHIFT, rng_from

LINEAR = "linear_regression"
LOGISTIC = "logistic_regression"
MLP = "mlp_1hidden"
VOXEL = "voxel_dice"

_KIND_IDS = {
    LINEAR: kernels.KIND_LINEAR,
    LOGISTIC: kernels.KIND_LOGISTIC,
    MLP: kernels.KIND_MLP,
    VOXEL: kernels.KIND_VOXEL,
}


@dataclass(frozen=True)
class Sample:
    """One training example: features, target, optional class label."""

    x: np.ndarray
    y: np.ndarray
    class_label: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.float64))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.float64))


@dataclass(frozen=True)
class ClientDataset:
    """A client's local samples; n_k == len(samples) >= 1."""

    client_id: int
    samples: tuple[Sample, ...]

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if len(self.samples) < 1:
            raise ValueError(f"client {self.client_id}: empty dataset")
        dims = {s.x.shape for s in self.samples}
        if len(dims) != 1:
            raise ValueError(f"client {self.client_id}: mixed feature shapes {dims}")

    @property
    def n_k(self) -> int:
        return len(self.samples)

    @cached_property
    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """(X, Y) float64 matrices in sample order, features flattened."""
        X = np.stack([s.x.reshape(-1) for s in self.samples]).astype(np.float64)
        Y = np.stack([np.atleast_1d(s.y).reshape(-1) for s in self.samples])
        return np.ascontiguousarray(X), np.ascontiguousarray(Y.astype(np.float64))

    def subset(self, indices: Sequence[int]) -> "ClientDataset":
        return ClientDataset(self.client_id, tuple(self.samples[i] for i in indices))


@dataclass(frozen=True)
class TaskModel:
    """Model family plus its dimensions and parameter block layout."""

    kind: str
    n_features: int = 0
    hidden: int = 0
    n_outputs: int = 1
    grid_shape: tuple[int, int, int] = (8, 8, 8)
    voxel_features: int = 4
    dice_eps: float = 1.0

    def __post_init__(self):
        if self.kind not in _KIND_IDS:
            raise ValueError(f"unknown model kind {self.kind!r}")

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.grid_shape))

    @cached_property
    def block_layout(self) -> tuple[tuple[str, int, int], ...]:
        if self.kind == LINEAR:
            spec = [("weights", self.n_features)]
        elif self.kind == LOGISTIC:
            spec = [("weights", self.n_features), ("bias", 1)]
        elif self.kind == MLP:
            d, h, o = self.n_features, self.hidden, self.n_outputs
            spec = [("layer1_w", h * d), ("layer1_b", h),
                    ("layer2_w", o * h), ("layer2_b", o)]
        else:
            spec = [("voxel_w", self.voxel_features), ("voxel_b", 1)]
        blocks, pos = [], 0
        for name, length in spec:
            blocks.append((name, pos, length))
            pos += length
        return tuple(blocks)

    @property
    def dim(self) -> int:
        name, start, length = self.block_layout[-1]
        return start + length

    @property
    def kernel_dims(self) -> tuple[int, int, int, int, int]:
        return (self.n_features, self.hidden, self.n_outputs,
                self.n_voxels, self.voxel_features)

    @property
    def kind_id(self) -> int:
        return _KIND_IDS[self.kind]

    def init_params(self, seed: int) -> ParamVector:
        """Deterministic initialization: N(0, 1/sqrt(fan_in)) weights, zero biases."""
        rng = rng_from(seed, 0)
        vals = np.zeros(self.dim)
        for name, start, length in self.block_layout:
            if name.endswith("_b") or name == "bias":
                continue
            fan_in = max(1, self.n_features if self.kind != VOXEL else self.voxel_features)
            vals[start: start + length] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), length)
        return ParamVector(vals, self.block_layout)

    def zero_params(self) -> ParamVector:
        return ParamVector(np.zeros(self.dim), self.block_layout)


def linear_regression(n_features: int) -> TaskModel:
    return TaskModel(LINEAR, n_features=n_features)


def logistic_regression(n_features: int) -> TaskModel:
    return TaskModel(LOGISTIC, n_features=n_features)


def mlp_1hidden(n_features: int, hidden: int = 8, n_outputs: int = 1) -> TaskModel:
    return TaskModel(MLP, n_features=n_features, hidden=hidden, n_outputs=n_outputs)


def voxel_dice(grid_shape=(8, 8, 8), voxel_features: int = 4,
               dice_eps: float = 1.0) -> TaskModel:
    return TaskModel(VOXEL, grid_shape=tuple(grid_shape),
                     voxel_features=voxel_features, dice_eps=dice_eps)


def _check_params(model: TaskModel, w: ParamVector):
    if w.blocks != model.block_layout:
        raise ValueError(
            f"parameters do not match the {model.kind} layout "
            f"({w.block_names} vs {[b[0] for b in model.block_layout]})")


def loss_and_grad(model: TaskModel, w: ParamVector,
                  batch: Sequence[Sample]) -> tuple[float, ParamVector]:
    """Mean loss over the batch and its gradient.

    Raises NonFiniteLossError naming the first offending sample if the
    forward pass produces NaN/Inf.
    """
    if not batch:
        raise ValueError("empty batch")
    _check_params(model, w)
    X = np.stack([s.x.reshape(-1) for s in batch]).astype(np.float64)
    Y = np.stack([np.atleast_1d(s.y).reshape(-1) for s in batch]).astype(np.float64)
    per_sample = kernels.eval_losses(model.kind_id, model.kernel_dims,
                                     w.values, X, Y, model.dice_eps)
    bad = np.flatnonzero(~np.isfinite(per_sample))
    if bad.size:
        raise NonFiniteLossError(
            f"non-finite loss in forward pass at sample {int(bad[0])}",
            sample_index=int(bad[0]))
    loss, grad = kernels.batch_grad(model.kind_id, model.kernel_dims,
                                    w.values, X, Y, model.dice_eps)
    return float(loss), ParamVector(grad, model.block_layout)


def soft_dice_loss(pred: np.ndarray, gt: np.ndarray,
                   eps: float = 1.0) -> tuple[float, np.ndarray]:
    """Smoothed soft Dice loss and its gradient with respect to ``pred``.

    loss = 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps). The smoothing
    term makes empty/empty pairs lossless instead of undefined.
    """
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    if eps <= 0:
        raise ValueError("eps must be > 0")
    num = 2.0 * float(np.sum(p * g)) + eps
    denom = float(np.sum(p)) + float(np.sum(g)) + eps
    loss = 1.0 - num / denom
    grad = (num - 2.0 * g * denom) / (denom * denom)
    return loss, grad


def partition_iid(pool: Sequence[Sample], m: int, seed: int,
                  first_client_id: int = 1) -> list[ClientDataset]:
    """Shuffle the pool by ``seed`` and deal samples round-robin to m clients.

    Sizes differ by at most one, with extras landing on the lowest client ids.
    """
    if m < 1:
        raise PartitionError(f"need at least one client, got {m}")
    if not pool:
        raise PartitionError("empty sample pool")
    if m > len(pool):
        raise PartitionError(f"cannot split {len(pool)} samples over {m} clients")
    perm = rng_from(seed, PARTITION).permutation(len(pool))
    out = []
    for i in range(m):
        picks = perm[i::m]
        out.append(ClientDataset(first_client_id + i,
                                 tuple(pool[j] for j in picks)))
    return out


def partition_profile(pool: Sequence[Sample],
                      profile: Sequence[tuple[int, int, Mapping[str, int] | None]],
                      seed: int) -> list[ClientDataset]:
    """Deterministic sampling without replacement honoring per-client counts
    and class mixes.

    ``profile`` rows are (client_id, count, class_mix); class_mix maps class
    labels to exact counts (summing to count) or is None for any-class picks.
    """
    total = sum(count for _, count, _ in profile)
    if total > len(pool):
        raise PartitionError(
            f"profile requests {total} samples but pool has {len(pool)}")
    order = rng_from(seed, PARTITION).permutation(len(pool))
    by_class: dict[str, list[int]] = {}
    for j in order:
        by_class.setdefault(pool[j].class_label, []).append(int(j))
    queues = {c: list(reversed(ix)) for c, ix in by_class.items()}  # pop() = first
    taken = np.zeros(len(pool), dtype=bool)

    deficits: list[tuple[str, int]] = []
    for client_id, count, mix in profile:
        if mix is not None:
            if sum(mix.values()) != count:
                raise PartitionError(
                    f"client {client_id}: class mix {dict(mix)} sums to "
                    f"{sum(mix.values())}, not {count}")
            for cls, need in mix.items():
                have = len(queues.get(cls, []))
                if need > have:
                    deficits.append((str(cls), need - have))
    if deficits:
        raise PartitionError(
            "unsatisfiable class mix; short by "
            + ", ".join(f"{n} of {c!r}" for c, n in deficits),
            deficits=deficits)

    out = []
    any_order = [int(j) for j in order]
    any_pos = 0
    for client_id, count, mix in profile:
        picks: list[int] = []
        if mix is not None:
            for cls, need in mix.items():
                q = queues[cls]
                for _ in range(need):
                    j = q.pop()
                    taken[j] = True
                    picks.append(j)
        else:
            while len(picks) < count:
                j = any_order[any_pos]
                any_pos += 1
                if not taken[j]:
                    taken[j] = True
                    picks.append(j)
        out.append(ClientDataset(client_id, tuple(pool[j] for j in picks)))
    return out


def apply_feature_shift(datasets: Sequence[ClientDataset], scale: float,
                        seed: int) -> list[ClientDataset]:
    """Add a per-client constant feature offset (heterogeneity knob)."""
    if scale == 0.0:
        return list(datasets)
    out = []
    for ds in datasets:
        rng = rng_from(seed, SHIFT, ds.client_id)
        offset = rng.normal(0.0, scale, ds.samples[0].x.shape)
        shifted = tuple(Sample(s.x + offset, s.y, s.class_label) for s in ds.samples)
        out.append(ClientDataset(ds.client_id, shifted))
    return out


def make_regression_pool(n: int, n_features: int, seed: int,
                         noise: float = 0.1) -> list[Sample]:
    """Linear teacher y = x . w* + noise; single-class pool."""
    rng = rng_from(seed, POOL)
    w_star = rng.normal(0.0, 1.0, n_features)
    X = rng.normal(0.0, 1.0, (n, n_features))
    y = X @ w_star + rng.normal(0.0, noise, n)
    return [Sample(X[i], np.array([y[i]])) for i in range(n)]


def _resolve_class_counts(n: int, class_fractions: Mapping[str, float] | None,
                          class_counts: Mapping[str, int] | None) -> dict[str, int]:
    if class_counts is not None:
        counts = {str(c): int(v) for c, v in class_counts.items()}
        if sum(counts.values()) != n:
            raise ValueError(
                f"class counts sum to {sum(counts.values())}, pool size is {n}")
        return counts
    fractions = dict(class_fractions or {"hgg": 0.7, "lgg": 0.3})
    if abs(sum(fractions.values()) - 1.0) > 1e-9:
        raise ValueError("class fractions must sum to 1")
    classes = sorted(fractions)
    counts = {c: int(round(fractions[c] * n)) for c in classes}
    counts[classes[0]] += n - sum(counts.values())
    return counts


def make_classification_pool(n: int, n_features: int, seed: int,
                             class_fractions: Mapping[str, float] | None = None,
                             class_shift: float = 1.0,
                             label_noise: float = 0.0,
                             class_counts: Mapping[str, int] | None = None,
                             ) -> list[Sample]:
    """Two-group binary classification pool.

    Each class label ("hgg"/"lgg" by default) shifts the feature mean along a
    random direction by +/- class_shift, emulating grade-driven distribution
    shift; binary targets come from one shared logistic teacher.
    """
    counts = _resolve_class_counts(n, class_fractions, class_counts)
    rng = rng_from(seed, POOL)
    w_star = rng.normal(0.0, 1.0, n_features)
    b_star = rng.normal(0.0, 0.5)
    direction = rng.normal(0.0, 1.0, n_features)
    direction /= np.linalg.norm(direction)
    classes = sorted(counts)
    samples = []
    for ci, cls in enumerate(classes):
        sign = 1.0 if ci % 2 == 0 else -1.0
        mean = sign * class_shift * direction
        X = rng.normal(0.0, 1.0, (counts[cls], n_features)) + mean
        p = 1.0 / (1.0 + np.exp(-(X @ w_star + b_star)))
        y = (rng.random(counts[cls]) < p).astype(np.float64)
        if label_noise > 0:
            flip = rng.random(counts[cls]) < label_noise
            y[flip] = 1.0 - y[flip]
        samples.extend(Sample(X[i], np.array([y[i]]), cls)
                       for i in range(counts[cls]))
    rng.shuffle(samples)
    return samples


def make_voxel_pool(n: int, seed: int, grid_shape=(8, 8, 8),
                    voxel_features: int = 4,
                    class_fractions: Mapping[str, float] | None = None,
                    noise: float = 0.3,
                    class_counts: Mapping[str, int] | None = None,
                    ) -> list[Sample]:
    """Synthetic blob-segmentation pool for the voxel Dice task.

    Targets are random spherical blobs; per-voxel features carry a noisy copy
    of the target plus coordinate channels. The class label controls blob
    radius ("lgg" blobs are smaller), and some samples are empty.
    """
    counts = _resolve_class_counts(n, class_fractions, class_counts)
    rng = rng_from(seed, POOL)
    gx, gy, gz = grid_shape
    coords = np.stack(np.meshgrid(np.arange(gx), np.arange(gy), np.arange(gz),
                                  indexing="ij"), axis=-1).reshape(-1, 3)
    classes = sorted(counts)
    samples = []
    for cls in classes:
        radius_range = (1.0, 2.2) if cls == "lgg" else (2.0, 3.6)
        for _ in range(counts[cls]):
            if rng.random() < 0.05:
                mask = np.zeros(coords.shape[0])
            else:
                center = rng.uniform(0, [gx - 1, gy - 1, gz - 1])
                radius = rng.uniform(*radius_range)
                mask = (np.linalg.norm(coords - center, axis=1) <= radius).astype(np.float64)
            feats = np.empty((coords.shape[0], voxel_features))
            feats[:, 0] = 2.0 * mask - 1.0 + rng.normal(0.0, noise, coords.shape[0])
            for j in range(1, voxel_features):
                if j <= 3:
                    span = grid_shape[j - 1] - 1 or 1
                    feats[:, j] = coords[:, j - 1] / span - 0.5
                else:
                    feats[:, j] = rng.normal(0.0, 1.0, coords.shape[0])
            samples.append(Sample(feats, mask, cls))
    rng.shuffle(samples)
    return samples


def make_pool(task: TaskModel, n: int, seed: int, **kwargs) -> list[Sample]:
    """Pool generator dispatch for the configured task kind."""
    if task.kind == LINEAR:
        return make_regression_pool(n, task.n_features, seed, **kwargs)
    if task.kind in (LOGISTIC, MLP):
        return make_classification_pool(n, task.n_features, seed, **kwargs)
    return make_voxel_pool(n, seed, task.grid_shape, task.voxel_features, **kwargs)


def predict_voxel_probs(model: TaskModel, w: ParamVector,
                        sample: Sample) -> np.ndarray:
    """Per-voxel foreground probabilities of the voxel task."""
    if model.kind != VOXEL:
        raise ValueError("voxel predictions only exist for the voxel_dice task")
    _check_params(model, w)
    f = model.voxel_features
    xs = sample.x.reshape(model.n_voxels, f)
    z = xs @ w.values[:f] + w.values[f]
    return 1.0 / (1.0 + np.exp(-z))
