"""Step-count, communication and simulated wall-clock accounting.

Communication is counted on the per-round critical path: one download plus
one upload of the shared payload per round, in floats. Time per round is the
slowest client's training + validation + transfer time; stragglers beyond
the deterministic maximum, queuing and failures are out of scope.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from .evaluation import local_split_sizes


@dataclass(frozen=True)
class CostConstants:
    """Reference hardware/network constants for the time simulation."""

    t_batch: float = 1.86            # seconds per training batch
    t_eval: float = 0.80             # seconds per validated patient
    download_rate: float = 20e6      # bytes/s
    upload_rate: float = 13.3e6      # bytes/s
    model_floats: float = 22.5e6     # shared parameter count
    bytes_per_float: float = 4.0

    def __post_init__(self):
        for name in ("t_batch", "t_eval", "download_rate", "upload_rate",
                     "model_floats", "bytes_per_float"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")


@dataclass(frozen=True)
class RoundPlan:
    """Per-round load of one training phase.

    steps_per_round / eval_per_round map client_id to SGD steps and
    validated patients per round; the shared payload is counted in floats
    each way.
    """

    rounds: int
    steps_per_round: Mapping[int, int]
    eval_per_round: Mapping[int, int]
    floats_down: float
    floats_up: float

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if min(self.steps_per_round.values(), default=0) < 0:
            raise ValueError("negative step counts")
        if min(self.eval_per_round.values(), default=0) < 0:
            raise ValueError("negative eval counts")
        if self.floats_down < 0 or self.floats_up < 0:
            raise ValueError("negative payloads")


def step_totals(plan: RoundPlan) -> tuple[int, int]:
    """(total SGD steps, total parallel SGD steps) over the whole run."""
    per_round = sum(plan.steps_per_round.values())
    parallel = max(plan.steps_per_round.values(), default=0)
    return plan.rounds * per_round, plan.rounds * parallel


def communication_total(plan: RoundPlan) -> float:
    """Total floats on the per-round critical path (down + up once a round)."""
    return plan.rounds * (plan.floats_down + plan.floats_up)


def simulated_time(plan: RoundPlan, consts: CostConstants) -> float:
    """Seconds: rounds * max_k(train + validate + transfer)."""
    comm = (plan.floats_down * consts.bytes_per_float / consts.download_rate
            + plan.floats_up * consts.bytes_per_float / consts.upload_rate)
    slowest = max(
        (plan.steps_per_round.get(k, 0) * consts.t_batch
         + plan.eval_per_round.get(k, 0) * consts.t_eval
         for k in set(plan.steps_per_round) | set(plan.eval_per_round)),
        default=0.0)
    return plan.rounds * (slowest + comm)


@dataclass(frozen=True)
class CostReport:
    """Accumulated cost of one algorithm (possibly several phases)."""

    algorithm: str
    total_steps: int
    parallel_steps: int
    comm_floats: float
    time_seconds: float

    @property
    def time_hours(self) -> float:
        return self.time_seconds / 3600.0

    @property
    def comm_giga_floats(self) -> float:
        return self.comm_floats / 1e9


def accumulate(algorithm: str, phases: Sequence[RoundPlan],
               consts: CostConstants) -> CostReport:
    """Sum step/communication/time totals over sequential phases."""
    total = parallel = 0
    comm = seconds = 0.0
    for plan in phases:
        t, p = step_totals(plan)
        total += t
        parallel += p
        comm += communication_total(plan)
        seconds += simulated_time(plan, consts)
    return CostReport(algorithm=algorithm, total_steps=total,
                      parallel_steps=parallel, comm_floats=comm,
                      time_seconds=seconds)


def profile_round_loads(sizes: Mapping[int, int], batch_size: int = 4,
                        fold: int = 0, n_folds: int = 5,
                        val_frac: float = 0.2, eval_fraction: float = 1.0,
                        ) -> tuple[dict[int, int], dict[int, int]]:
    """Per-client (steps, eval patients) per round for a fixed-epoch round.

    Steps follow the fold protocol: one epoch over the local training split
    (ceil(train / batch)). Validation covers the full local validation split
    every round by default; ``eval_fraction`` scales the per-round validated
    patient count for setups that validate less often.
    """
    if not 0.0 <= eval_fraction <= 1.0:
        raise ValueError("eval_fraction must be in [0, 1]")
    steps: dict[int, int] = {}
    evals: dict[int, int] = {}
    for client_id, n_k in sizes.items():
        _, val, train = local_split_sizes(n_k, fold, n_folds, val_frac)
        steps[client_id] = math.ceil(train / batch_size)
        evals[client_id] = math.floor(val * eval_fraction + 0.5)
    return steps, evals


def fixed_epoch_plan(sizes: Mapping[int, int], rounds: int,
                     consts: CostConstants, local_epochs: int = 1,
                     batch_size: int = 4, payload_multiplier: float = 1.0,
                     shared_fraction: float = 1.0, fold: int = 0,
                     eval_fraction: float = 1.0) -> RoundPlan:
    """Round plan for epoch-budget algorithms on a profile of client sizes."""
    steps, evals = profile_round_loads(sizes, batch_size, fold,
                                       eval_fraction=eval_fraction)
    steps = {k: local_epochs * v for k, v in steps.items()}
    payload = consts.model_floats * payload_multiplier * shared_fraction
    return RoundPlan(rounds=rounds, steps_per_round=steps,
                     eval_per_round=evals, floats_down=payload,
                     floats_up=payload)


def fixed_iteration_plan(sizes: Mapping[int, int], rounds: int,
                         iterations: int, consts: CostConstants,
                         batch_size: int = 4, fold: int = 0,
                         eval_fraction: float = 1.0) -> RoundPlan:
    """Round plan for iteration-budget algorithms (same eval protocol)."""
    _, evals = profile_round_loads(sizes, batch_size, fold,
                                   eval_fraction=eval_fraction)
    steps = {k: iterations for k in sizes}
    return RoundPlan(rounds=rounds, steps_per_round=steps,
                     eval_per_round=evals,
                     floats_down=consts.model_floats,
                     floats_up=consts.model_floats)


def local_only_plan(sizes: Mapping[int, int], epochs: int,
                    consts: CostConstants, batch_size: int = 4,
                    fold: int = 0, clients: Sequence[int] | None = None,
                    ) -> RoundPlan:
    """Communication-free local epochs (finetuning or isolated training)."""
    steps, evals = profile_round_loads(sizes, batch_size, fold)
    if clients is not None:
        keep = set(clients)
        steps = {k: v for k, v in steps.items() if k in keep}
        evals = {k: v for k, v in evals.items() if k in keep}
    return RoundPlan(rounds=epochs, steps_per_round=steps,
                     eval_per_round=evals, floats_down=0.0, floats_up=0.0)


def centralized_plan(sizes: Mapping[int, int], epochs: int,
                     consts: CostConstants, batch_size: int = 4,
                     fold: int = 0) -> RoundPlan:
    """Pooled-data training: one virtual client owning every local split."""
    pooled_train = pooled_val = 0
    for n_k in sizes.values():
        _, val, train = local_split_sizes(n_k, fold)
        pooled_train += train
        pooled_val += val
    steps = {0: math.ceil(pooled_train / batch_size)}
    evals = {0: pooled_val}
    return RoundPlan(rounds=epochs, steps_per_round=steps,
                     eval_per_round=evals, floats_down=0.0, floats_up=0.0)


def benchmark_cost_table(sizes: Mapping[int, int], consts: CostConstants,
                         rounds: int = 300, iteration_rounds: int = 720,
                         iterations: int = 10, finetune_epochs: int = 30,
                         batch_size: int = 4, fold: int = 0,
                         eval_fraction: float = 1.0,
                         ) -> list[CostReport]:
    """Cost rows for every benchmarked algorithm on one size profile."""
    biggest = max(sizes, key=lambda k: (sizes[k], -k))
    fed = lambda mult=1.0, frac=1.0: fixed_epoch_plan(
        sizes, rounds, consts, batch_size=batch_size,
        payload_multiplier=mult, shared_fraction=frac, fold=fold,
        eval_fraction=eval_fraction)
    rows = [
        accumulate(f"local_institution_{biggest}",
                   [local_only_plan(sizes, rounds, consts, batch_size, fold,
                                    clients=[biggest])], consts),
        accumulate("centralized",
                   [centralized_plan(sizes, rounds, consts, batch_size, fold)],
                   consts),
        accumulate("fedavg_fixed_epochs", [fed()], consts),
        accumulate("fedavg_fixed_iterations",
                   [fixed_iteration_plan(sizes, iteration_rounds, iterations,
                                         consts, batch_size, fold,
                                         eval_fraction)], consts),
        accumulate("fedavg_uniform", [fed()], consts),
        accumulate("fednova", [fed()], consts),
        accumulate("fedadam", [fed()], consts),
        accumulate("qfedavg", [fed()], consts),
        accumulate("fedpidavg", [fed()], consts),
        accumulate("scaffold", [fed(mult=2.0)], consts),
        accumulate("local_finetuning",
                   [fed(), local_only_plan(sizes, finetune_epochs, consts,
                                           batch_size, fold)], consts),
        accumulate("ditto",
                   [fed(), local_only_plan(sizes, finetune_epochs, consts,
                                           batch_size, fold)], consts),
        accumulate("fedper", [fed()], consts),
        accumulate("lg_fedavg", [fed()], consts),
        accumulate("cfl", [fed()], consts),
        accumulate("prior_cfl", [fed()], consts),
    ]
    return rows
