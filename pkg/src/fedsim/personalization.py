"""Personalized training: partial model sharing, finetuning and Ditto.

Partial sharing (FedPer / LG-FedAvg) keeps a contiguous group of blocks
private per client and aggregates only the shared ones. Finetuning continues
training locally from a converged global model; a proximal pull toward that
model (lambda > 0) gives the regularized Ditto variant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .params import ParamVector, UpdateSet, combine, masked_overwrite
from .tasks import ClientDataset, TaskModel
from .trainer import Epochs, TrainerConfig, local_update, local_validate

FEDPER = "fedper"
LG_FEDAVG = "lg_fedavg"
CUSTOM = "custom"


@dataclass(frozen=True)
class ShareMask:
    """Which blocks are federated; the rest stay client-private."""

    shared_blocks: tuple[str, ...]
    strategy: str
    n_private: int

    def private_blocks(self, all_blocks: Sequence[str]) -> tuple[str, ...]:
        shared = set(self.shared_blocks)
        return tuple(b for b in all_blocks if b not in shared)


def make_share_mask(blocks: Sequence[str], strategy: str,
                    n_private: int) -> ShareMask:
    """FedPer keeps the last ``n_private`` blocks private; LG-FedAvg the first."""
    names = [str(b) for b in blocks]
    if not 0 < n_private < len(names):
        raise ValueError(
            f"n_private must be in (0, {len(names)}); got {n_private} "
            "(0 private blocks is plain FedAvg)")
    if strategy == FEDPER:
        shared = tuple(names[: len(names) - n_private])
    elif strategy == LG_FEDAVG:
        shared = tuple(names[n_private:])
    else:
        raise ValueError(f"unknown partial-sharing strategy {strategy!r}")
    return ShareMask(shared_blocks=shared, strategy=strategy, n_private=n_private)


def restrict_to_shared(delta: ParamVector, mask: ShareMask) -> ParamVector:
    """Zero out every private entry of an update."""
    out = np.zeros(delta.dim)
    for name in mask.shared_blocks:
        sl = delta.block_slice(name)
        out[sl] = delta.values[sl]
    return delta.with_values(out)


def partial_round(w_global: ParamVector,
                  private_states: Mapping[int, ParamVector],
                  u: UpdateSet, mask: ShareMask,
                  ) -> tuple[ParamVector, Mapping[int, ParamVector]]:
    """Aggregate shared entries only; private entries stay untouched.

    Every delta must be zero outside the shared blocks: a nonzero private
    delta means the caller leaked private training into the update.
    """
    for name in mask.shared_blocks:
        w_global.block_slice(name)  # raises UnknownBlockError on bad mask
    shared = np.zeros(w_global.dim, dtype=bool)
    for name in mask.shared_blocks:
        shared[w_global.block_slice(name)] = True
    for i, up in enumerate(u.updates):
        leak = np.flatnonzero((up.delta.values != 0.0) & ~shared)
        if leak.size:
            raise ValueError(
                f"client {up.client_id}: nonzero update outside shared blocks "
                f"(first at flat index {int(leak[0])})")
    w_new = w_global + combine(u.weights, u.deltas)
    return w_new, private_states


def client_round_start(w_global: ParamVector, private_full: ParamVector,
                       mask: ShareMask) -> ParamVector:
    """Client's round-start parameters: shared from server, private kept."""
    return masked_overwrite(private_full, w_global, mask.shared_blocks)


@dataclass(frozen=True)
class PersonalizedCheckpoint:
    """A client's best-validation parameters during personalized training."""

    client_id: int
    params: ParamVector
    val_loss: float
    epoch: int


@dataclass(frozen=True)
class PersonalizedSet:
    """One checkpoint per client; checkpoint loss <= final-epoch loss."""

    checkpoints: Mapping[int, PersonalizedCheckpoint]

    def params_of(self, client_id: int) -> ParamVector:
        return self.checkpoints[client_id].params


@dataclass(frozen=True)
class FinetuneResult:
    checkpoint: PersonalizedCheckpoint
    start_val_loss: float
    val_losses: tuple[float, ...]    # one per epoch
    train_losses: tuple[float, ...]  # mean batch loss per epoch
    final_params: ParamVector


def finetune(model: TaskModel, w_start: ParamVector, train: ClientDataset,
             val: ClientDataset, cfg: TrainerConfig, epochs: int,
             lam: float = 0.0, seed: int = 0) -> FinetuneResult:
    """Locally finetune from a converged global model.

    Runs ``epochs`` single-epoch updates, validating after each, and keeps
    the best-validation checkpoint (the starting model counts as epoch 0,
    earliest epoch wins ties). lam > 0 adds the proximal pull toward
    ``w_start`` (Ditto); the anchor is frozen at the starting model for the
    whole finetuning.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    prox = (lam, w_start) if lam > 0 else None
    w = w_start
    lr = cfg.learning_rate
    start_val = local_validate(model, w_start, val)
    best = PersonalizedCheckpoint(train.client_id, w_start, start_val, 0)
    val_curve: list[float] = []
    train_curve: list[float] = []
    for epoch in range(1, epochs + 1):
        step_cfg = TrainerConfig(
            learning_rate=lr, batch_size=cfg.batch_size,
            weight_decay=cfg.weight_decay,
            lr_decay_factor=cfg.lr_decay_factor, budget=Epochs(1))
        res = local_update(model, w, train, step_cfg, prox=prox,
                           seed=_epoch_seed(seed, epoch))
        w = w + res.delta
        lr = res.lr_after
        val_loss = local_validate(model, w, val)
        val_curve.append(val_loss)
        train_curve.append(float(np.mean(res.train_losses)))
        if val_loss < best.val_loss:
            best = PersonalizedCheckpoint(train.client_id, w, val_loss, epoch)
    return FinetuneResult(checkpoint=best, start_val_loss=start_val,
                          val_losses=tuple(val_curve),
                          train_losses=tuple(train_curve), final_params=w)


def _epoch_seed(seed: int, epoch: int) -> int:
    # distinct, collision-resistant per-epoch shuffle streams under one seed
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(7, int(epoch)))
    return int(ss.generate_state(1, np.uint64)[0])
