"""Client-side SGD with control-variate correction and proximal anchoring.

One call covers every local objective used in the simulator:

  w <- w - eta * (grad + weight_decay * w + lambda * (w - anchor))
         + eta * (c - c_k)

Budgets are either a number of epochs (seeded shuffle per epoch, last short
batch kept) or an exact number of iterations. The learning rate decays by
``lr_decay_factor`` after each epoch under an epoch budget and once per call
under an iteration budget; the decayed rate is returned so the caller can
carry it into the next round.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .errors import NonFiniteLossError
from .params import ParamVector
from .seeding import LOCAL, rng_from
from .tasks import ClientDataset, TaskModel, _check_params


@dataclass(frozen=True)
class Epochs:
    count: int


@dataclass(frozen=True)
class Iterations:
    count: int


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float
    batch_size: int = 4
    weight_decay: float = 1e-5
    lr_decay_factor: float = 0.995
    budget: Epochs | Iterations = Epochs(1)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0 < self.lr_decay_factor <= 1):
            raise ValueError("lr_decay_factor must be in (0, 1]")
        if self.budget.count < 0:
            raise ValueError("budget must be >= 0")

    def with_learning_rate(self, lr: float) -> "TrainerConfig":
        return replace(self, learning_rate=lr)


@dataclass(frozen=True)
class LocalResult:
    """Outcome of one local training call.

    delta == w_out - w_in; steps is the exact number of gradient steps.
    val_loss and delta_control are filled in by the orchestration layer for
    the algorithms that need them.
    """

    delta: ParamVector
    steps: int
    train_losses: tuple[float, ...]
    lr_after: float
    val_loss: float | None = None
    delta_control: ParamVector | None = None


def _batch_plan(n: int, cfg: TrainerConfig, seed: int):
    """Index/offset/eta arrays for every step of the budget."""
    rng = rng_from(seed, LOCAL)
    b = cfg.batch_size
    per_epoch = math.ceil(n / b)
    if isinstance(cfg.budget, Epochs):
        n_steps = cfg.budget.count * per_epoch
        epochs = cfg.budget.count
    else:
        n_steps = cfg.budget.count
        epochs = math.ceil(n_steps / per_epoch) if n_steps else 0
    idx = np.empty(0, dtype=np.int64)
    etas = np.empty(n_steps)
    offsets = np.zeros(n_steps + 1, dtype=np.int64)
    step = 0
    pos = 0
    chunks = []
    lr = cfg.learning_rate
    for _ in range(epochs):
        perm = rng.permutation(n).astype(np.int64)
        for lo in range(0, n, b):
            if step == n_steps:
                break
            batch = perm[lo: lo + b]
            chunks.append(batch)
            pos += batch.shape[0]
            offsets[step + 1] = pos
            etas[step] = lr
            step += 1
        if isinstance(cfg.budget, Epochs):
            lr *= cfg.lr_decay_factor
    if isinstance(cfg.budget, Iterations):
        lr = cfg.learning_rate * cfg.lr_decay_factor
    idx = np.concatenate(chunks).astype(np.int64) if chunks else idx
    return idx, offsets, etas, lr


def local_update(model: TaskModel, w_in: ParamVector, data: ClientDataset,
                 cfg: TrainerConfig,
                 correction: tuple[ParamVector, ParamVector] | None = None,
                 prox: tuple[float, ParamVector] | None = None,
                 seed: int = 0) -> LocalResult:
    """Run the local SGD budget from ``w_in`` on the client's data.

    ``correction`` is the control-variate pair (c, c_k); ``prox`` is
    (lambda, anchor) for the proximal term. Identical inputs give a
    bitwise-identical result.
    """
    _check_params(model, w_in)
    if data.n_k < 1:
        raise ValueError("empty dataset")
    corr = None
    if correction is not None:
        c, c_k = correction
        if c.dim != w_in.dim or c_k.dim != w_in.dim:
            raise ValueError("control variates do not match the model dimension")
        corr = c.values - c_k.values
    lam, anchor = 0.0, None
    if prox is not None:
        lam, anchor_pv = prox
        if lam < 0:
            raise ValueError("proximal lambda must be >= 0")
        if anchor_pv.dim != w_in.dim:
            raise ValueError("proximal anchor does not match the model dimension")
        anchor = anchor_pv.values

    X, Y = data.stacked
    idx, offsets, etas, lr_after = _batch_plan(data.n_k, cfg, seed)
    w_out, losses = kernels.sgd_run(
        model.kind_id, model.kernel_dims, w_in.values, X, Y,
        idx, offsets, etas, cfg.weight_decay, lam, anchor, corr, model.dice_eps)
    bad = np.flatnonzero(~np.isfinite(losses))
    if bad.size:
        raise NonFiniteLossError(
            f"client {data.client_id}: non-finite loss at step {int(bad[0])}",
            step_index=int(bad[0]))
    if not np.all(np.isfinite(w_out)):
        raise NonFiniteLossError(
            f"client {data.client_id}: parameters diverged during local update",
            step_index=len(losses) - 1)
    delta = ParamVector(w_out - w_in.values, w_in.blocks)
    return LocalResult(delta=delta, steps=len(losses),
                       train_losses=tuple(float(v) for v in losses),
                       lr_after=lr_after)


def local_validate(model: TaskModel, w: ParamVector,
                   val_data: ClientDataset) -> float:
    """Sum of per-sample losses on the validation split."""
    _check_params(model, w)
    if val_data.n_k < 1:
        raise ValueError("empty validation dataset")
    X, Y = val_data.stacked
    losses = kernels.eval_losses(model.kind_id, model.kernel_dims,
                                 w.values, X, Y, model.dice_eps)
    bad = np.flatnonzero(~np.isfinite(losses))
    if bad.size:
        raise NonFiniteLossError(
            f"client {val_data.client_id}: non-finite validation loss at "
            f"sample {int(bad[0])}", sample_index=int(bad[0]))
    return float(np.sum(losses))
