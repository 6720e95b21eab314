"""Experiment orchestration: the round loop for every algorithm, model
selection, evaluation, reporting.

A run is fully determined by (config, seed): data generation, partitioning,
fold assignment, batch orders and client seeds all derive from the master
seed with structural keys. Client work may execute on a thread pool, but
results are always reduced in ascending client_id order, so the report's
content hash does not depend on the worker count.
"""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import aggregation as agg
from . import cost as costmod
from . import kernels
from .clustering import (cluster_weights, initial_cluster_state,
                         prior_clusters, scheduled_cfl_round)
from .config import ExperimentConfig
from .errors import ConfigError, FedsimError
from .evaluation import (FoldPlan, MaskPair, MetricsReport, SampleMetrics,
                         aggregate_report, build_folds, dice_score, hausdorff95)
from .params import ParamVector, ClientUpdate, UpdateSet, combine, load_params, save_params
from .personalization import (FinetuneResult, PersonalizedCheckpoint,
                              client_round_start, finetune, make_share_mask,
                              partial_round, restrict_to_shared)
from .profiles import prior_grade_assignment
from .tasks import (VOXEL, ClientDataset, TaskModel,
                    apply_feature_shift, make_pool, partition_iid,
                    partition_profile, predict_voxel_probs)
from .trainer import (Epochs, Iterations, LocalResult, TrainerConfig,
                      local_update, local_validate)

SCHEMA_VERSION = 1


class RoundExecutionError(FedsimError):
    """A client task failed; carries the round index and client id."""

    def __init__(self, message: str, round_index: int, client_id: int):
        super().__init__(message)
        self.round_index = round_index
        self.client_id = client_id


def client_seed(seed: int, round_index: int, position: int) -> int:
    """Seed of one client's local work in one round (position = rank in the
    sorted client list, so a one-client federation matches pooled training)."""
    ss = np.random.SeedSequence(entropy=int(seed),
                                spawn_key=(11, int(round_index), int(position)))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass
class RunContext:
    cfg: ExperimentConfig
    model: TaskModel
    partition: list[ClientDataset]
    fold_plan: FoldPlan
    fold: int
    client_ids: list[int]
    train: dict[int, ClientDataset]
    val: dict[int, ClientDataset]
    test: dict[int, ClientDataset | None]
    weights: list[float]  # p_k over training sizes, ascending client order

    @property
    def val_total(self) -> int:
        return sum(self.val[k].n_k for k in self.client_ids)


def prepare_context(cfg: ExperimentConfig) -> RunContext:
    model = cfg.task_model()
    pool_cfg = dict(cfg.task.get("pool") or {})
    part_cfg = cfg.partition

    if part_cfg["mode"] == "profile":
        rows = cfg.profile_rows()
        total = sum(count for _, count, _ in rows)
        size = int(pool_cfg.pop("size", total))
        if size < total:
            raise ConfigError(f"pool size {size} below profile total {total}")
        mixes = [mix for _, _, mix in rows if mix]
        if mixes:
            class_counts: dict[str, int] = {}
            for mix in mixes:
                for cls, cnt in mix.items():
                    class_counts[cls] = class_counts.get(cls, 0) + int(cnt)
            unmixed = size - sum(class_counts.values())
            if unmixed < 0:
                raise ConfigError("profile class mixes exceed the pool size")
            biggest = max(sorted(class_counts), key=lambda c: class_counts[c])
            class_counts[biggest] += unmixed
            pool_cfg.setdefault("class_counts", class_counts)
        pool = make_pool(model, size, cfg.seed, **pool_cfg)
        partition = partition_profile(pool, rows, cfg.seed)
    else:
        clients = int(part_cfg["clients"])
        size = int(pool_cfg.pop("size", 50 * clients))
        pool = make_pool(model, size, cfg.seed, **pool_cfg)
        partition = partition_iid(pool, clients, cfg.seed)

    shift = float(part_cfg.get("feature_shift", 0.0))
    if shift:
        partition = apply_feature_shift(partition, shift, cfg.seed)

    folds = cfg.folds
    plan = build_folds(partition, int(folds["n_folds"]),
                       float(folds["val_frac"]), cfg.seed)
    fold = int(folds["fold"])
    client_ids = sorted(ds.client_id for ds in partition)
    by_id = {ds.client_id: ds for ds in partition}
    train: dict[int, ClientDataset] = {}
    val: dict[int, ClientDataset] = {}
    test: dict[int, ClientDataset | None] = {}
    for cid in client_ids:
        tr, va, te = plan.split(cid, fold)
        if not tr:
            raise ConfigError(
                f"client {cid} has an empty training split in fold {fold}; "
                "give it more samples or fewer folds")
        train[cid] = by_id[cid].subset(tr)
        val[cid] = by_id[cid].subset(va)
        test[cid] = by_id[cid].subset(te) if te else None
    n_total = sum(train[c].n_k for c in client_ids)
    weights = [train[c].n_k / n_total for c in client_ids]
    return RunContext(cfg=cfg, model=model, partition=partition,
                      fold_plan=plan, fold=fold, client_ids=client_ids,
                      train=train, val=val, test=test, weights=weights)


def _trainer_config(hyper: Mapping[str, Any], lr: float,
                    budget: Epochs | Iterations) -> TrainerConfig:
    return TrainerConfig(
        learning_rate=lr,
        batch_size=int(hyper["batch_size"]),
        weight_decay=float(hyper["weight_decay"]),
        lr_decay_factor=float(hyper["lr_decay_factor"]),
        budget=budget)


def _map_clients(ctx: RunContext, round_index: int, workers: int,
                 fn: Callable[[int, int], Any]) -> list[Any]:
    """Run fn(position, client_id) for every client; results in id order."""
    jobs = list(enumerate(ctx.client_ids))
    if workers <= 1:
        out = []
        for pos, cid in jobs:
            out.append(_guard(fn, pos, cid, round_index))
        return out
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_guard, fn, pos, cid, round_index)
                   for pos, cid in jobs]
        return [f.result() for f in futures]


def _guard(fn, pos: int, cid: int, round_index: int):
    try:
        return fn(pos, cid)
    except RoundExecutionError:
        raise
    except Exception as exc:
        raise RoundExecutionError(
            f"round {round_index}, client {cid}: {exc}",
            round_index=round_index, client_id=cid) from exc


class _Curves:
    """Fixed-length per-round series."""

    def __init__(self, client_ids: Sequence[int]):
        self.client_ids = list(client_ids)
        self.rows: dict[str, list[float]] = {"global_val_loss": [], "lr": []}
        for cid in client_ids:
            self.rows[f"val_loss_client_{cid}"] = []
            self.rows[f"train_loss_client_{cid}"] = []

    def record(self, lr: float, val_sums: Mapping[int, float],
               val_counts: Mapping[int, int],
               train_means: Mapping[int, float]) -> float:
        total = sum(val_sums.values())
        count = sum(val_counts.values())
        global_val = total / count if count else float("nan")
        self.rows["global_val_loss"].append(float(global_val))
        self.rows["lr"].append(float(lr))
        for cid in self.client_ids:
            self.rows[f"val_loss_client_{cid}"].append(float(val_sums[cid]))
            self.rows[f"train_loss_client_{cid}"].append(float(train_means[cid]))
        return float(global_val)


@dataclass
class RunOutcome:
    curves: dict[str, list[float]]
    best_round: int
    best_val_loss: float
    checkpoints: dict[str, ParamVector]
    client_models: dict[int, ParamVector]
    cluster_history: list[dict] = field(default_factory=list)


class _Selector:
    """Tracks the minimum global validation loss (earliest round on ties)."""

    def __init__(self):
        self.best_round = -1
        self.best_val = float("inf")

    def offer(self, round_index: int, value: float) -> bool:
        if value < self.best_val:
            self.best_val = value
            self.best_round = round_index
            return True
        return False


def _validate_all(ctx: RunContext, model_of: Callable[[int], ParamVector],
                  round_index: int) -> tuple[dict[int, float], dict[int, int]]:
    sums, counts = {}, {}
    for pos, cid in enumerate(ctx.client_ids):
        sums[cid] = _guard(
            lambda p, c: local_validate(ctx.model, model_of(c), ctx.val[c]),
            pos, cid, round_index)
        counts[cid] = ctx.val[cid].n_k
    return sums, counts


def _run_global_family(ctx: RunContext, workers: int) -> RunOutcome:
    """Round loop of the single-global-model algorithms."""
    cfg = ctx.cfg
    hyper = cfg.hyper
    algorithm = cfg.algorithm
    model = ctx.model
    w = model.init_params(cfg.seed)
    lr = float(hyper["learning_rate"])
    if algorithm == "fedavg_fixed_iterations":
        budget: Epochs | Iterations = Iterations(int(hyper["local_iterations"]))
    else:
        budget = Epochs(int(hyper["local_epochs"]))

    adam_state = None
    if algorithm == "fedadam":
        adam_state = agg.FedAdamState.zeros(
            w, beta1=float(hyper["beta1"]), beta2=float(hyper["beta2"]),
            tau=float(hyper["tau"]), server_lr=float(hyper["server_lr"]))
    scaffold_state = None
    if algorithm == "scaffold":
        scaffold_state = agg.ScaffoldState.zeros(w, ctx.client_ids)
    pid_state = None
    if algorithm == "fedpidavg":
        pid_state = agg.PidState.empty(
            ctx.client_ids, alpha=float(hyper["alpha"]),
            beta=float(hyper["beta"]), gamma=float(hyper["gamma"]))

    curves = _Curves(ctx.client_ids)
    selector = _Selector()
    best_params = w
    conservation_gap: list[float] = []

    for r in range(cfg.rounds):
        cfg_round = _trainer_config(hyper, lr, budget)
        w_round = w

        qfed_losses = None
        if algorithm == "qfedavg":
            qfed_losses = {
                cid: _guard(lambda p, c: local_validate(model, w_round,
                                                        ctx.train[c]),
                            pos, cid, r)
                for pos, cid in enumerate(ctx.client_ids)}

        def work(pos: int, cid: int) -> LocalResult:
            correction = None
            if scaffold_state is not None:
                correction = (scaffold_state.c, scaffold_state.c_k[cid])
            return local_update(model, w_round, ctx.train[cid], cfg_round,
                                correction=correction,
                                seed=client_seed(cfg.seed, r, pos))

        results = _map_clients(ctx, r, workers, work)
        by_id = dict(zip(ctx.client_ids, results))

        updates = []
        for cid, res in by_id.items():
            delta_control = None
            if scaffold_state is not None:
                delta_c, c_k_new = agg.scaffold_client_finalize(
                    scaffold_state.c, scaffold_state.c_k[cid],
                    res.delta, res.steps, lr)
                scaffold_state = scaffold_state.with_client_control(cid, c_k_new)
                delta_control = delta_c
            updates.append(ClientUpdate(cid, res.delta, res.steps,
                                        delta_control=delta_control))
        u = UpdateSet(tuple(updates), tuple(ctx.weights))

        if algorithm in ("fedavg_fixed_epochs", "fedavg_fixed_iterations"):
            w = agg.fedavg_step(w, u, mode="weighted")
        elif algorithm == "fedavg_uniform":
            w = agg.fedavg_step(w, u, mode="uniform")
        elif algorithm == "fednova":
            w = agg.fednova_step(w, u)
        elif algorithm == "fedadam":
            w, adam_state = agg.fedadam_step(adam_state, w, u)
        elif algorithm == "scaffold":
            w, scaffold_state = agg.scaffold_server_step(scaffold_state, w, u)
        elif algorithm == "qfedavg":
            losses = [qfed_losses[cid] for cid in ctx.client_ids]
            w = agg.qfedavg_step(w, u, losses, float(hyper["q"]), lr)
        elif algorithm == "fedpidavg":
            local_val = {cid: _guard(
                lambda p, c: local_validate(model, w_round + by_id[c].delta,
                                            ctx.val[c]), pos, cid, r)
                         for pos, cid in enumerate(ctx.client_ids)}
            pid_state = pid_state.observe(local_val)
            current = [local_val[cid] for cid in ctx.client_ids]
            w = agg.fedpid_step(pid_state, w, u, current)
        else:
            raise ConfigError(f"unhandled global algorithm {algorithm}")

        if scaffold_state is not None:
            # invariant: c stays the weighted mean of the client controls
            mean_c = combine(ctx.weights,
                             [scaffold_state.c_k[cid] for cid in ctx.client_ids])
            conservation_gap.append(
                float(np.max(np.abs(scaffold_state.c.values - mean_c.values))))

        val_sums, val_counts = _validate_all(ctx, lambda cid: w, r)
        train_means = {cid: float(np.mean(by_id[cid].train_losses))
                       for cid in ctx.client_ids}
        global_val = curves.record(lr, val_sums, val_counts, train_means)
        if selector.offer(r, global_val):
            best_params = w
        lr = by_id[ctx.client_ids[0]].lr_after

    if conservation_gap:
        curves.rows["scaffold_conservation_gap"] = conservation_gap
    checkpoints = {"best_global": best_params, "final_global": w}
    client_models = {cid: best_params for cid in ctx.client_ids}
    return RunOutcome(curves=curves.rows, best_round=selector.best_round,
                      best_val_loss=selector.best_val,
                      checkpoints=checkpoints, client_models=client_models)


def _run_centralized(ctx: RunContext, workers: int) -> RunOutcome:
    """Pooled-data SGD; the upper baseline. One virtual client at position 0."""
    cfg = ctx.cfg
    hyper = cfg.hyper
    model = ctx.model
    pooled_train = ClientDataset(0, tuple(
        s for cid in ctx.client_ids for s in ctx.train[cid].samples))
    pooled_val = ClientDataset(0, tuple(
        s for cid in ctx.client_ids for s in ctx.val[cid].samples))
    w = model.init_params(cfg.seed)
    lr = float(hyper["learning_rate"])
    budget = Epochs(int(hyper["local_epochs"]))

    curves = _Curves([0])
    selector = _Selector()
    best_params = w
    for r in range(cfg.rounds):
        cfg_round = _trainer_config(hyper, lr, budget)
        res = _guard(lambda pos, cid: local_update(
            model, w, pooled_train, cfg_round,
            seed=client_seed(cfg.seed, r, 0)), 0, 0, r)
        w = w + res.delta
        val_sum = local_validate(model, w, pooled_val)
        global_val = curves.record(
            lr, {0: val_sum}, {0: pooled_val.n_k},
            {0: float(np.mean(res.train_losses))})
        if selector.offer(r, global_val):
            best_params = w
        lr = res.lr_after

    checkpoints = {"best_global": best_params, "final_global": w}
    client_models = {cid: best_params for cid in ctx.client_ids}
    return RunOutcome(curves=curves.rows, best_round=selector.best_round,
                      best_val_loss=selector.best_val,
                      checkpoints=checkpoints, client_models=client_models)


def _run_local_training(ctx: RunContext, workers: int) -> RunOutcome:
    """Isolated per-client training; rounds are local epochs."""
    cfg = ctx.cfg
    hyper = cfg.hyper
    model = ctx.model
    w0 = model.init_params(cfg.seed)
    params = {cid: w0 for cid in ctx.client_ids}
    lrs = {cid: float(hyper["learning_rate"]) for cid in ctx.client_ids}
    best: dict[int, PersonalizedCheckpoint] = {
        cid: PersonalizedCheckpoint(cid, w0,
                                    local_validate(model, w0, ctx.val[cid]), -1)
        for cid in ctx.client_ids}
    curves = _Curves(ctx.client_ids)
    selector = _Selector()

    for r in range(cfg.rounds):
        def work(pos: int, cid: int) -> LocalResult:
            cfg_round = _trainer_config(hyper, lrs[cid],
                                        Epochs(int(hyper["local_epochs"])))
            return local_update(model, params[cid], ctx.train[cid], cfg_round,
                                seed=client_seed(cfg.seed, r, pos))

        results = _map_clients(ctx, r, workers, work)
        val_sums, val_counts, train_means = {}, {}, {}
        for pos, (cid, res) in enumerate(zip(ctx.client_ids, results)):
            params[cid] = params[cid] + res.delta
            lrs[cid] = res.lr_after
            v = _guard(lambda p, c: local_validate(model, params[c], ctx.val[c]),
                       pos, cid, r)
            val_sums[cid] = v
            val_counts[cid] = ctx.val[cid].n_k
            train_means[cid] = float(np.mean(res.train_losses))
            if v < best[cid].val_loss:
                best[cid] = PersonalizedCheckpoint(cid, params[cid], v, r)
        global_val = curves.record(lrs[ctx.client_ids[0]], val_sums,
                                   val_counts, train_means)
        selector.offer(r, global_val)

    checkpoints = {f"client_{cid}": best[cid].params for cid in ctx.client_ids}
    client_models = {cid: best[cid].params for cid in ctx.client_ids}
    return RunOutcome(curves=curves.rows, best_round=selector.best_round,
                      best_val_loss=selector.best_val,
                      checkpoints=checkpoints, client_models=client_models)


def _run_finetuning(ctx: RunContext, workers: int) -> RunOutcome:
    """Local finetuning / Ditto from a converged global checkpoint."""
    cfg = ctx.cfg
    hyper = cfg.hyper
    model = ctx.model
    w_start = load_params(hyper["source_checkpoint"])
    if w_start.blocks != model.block_layout:
        raise ConfigError("source checkpoint does not match the task model")
    lam = float(hyper.get("lambda", 0.0)) if cfg.algorithm == "ditto" else 0.0
    epochs = cfg.rounds  # rounds count finetuning epochs for these algorithms
    per_client_lr = {int(k): float(v)
                     for k, v in (hyper.get("per_client_lr") or {}).items()}

    def work(pos: int, cid: int) -> FinetuneResult:
        lr = per_client_lr.get(cid, float(hyper["learning_rate"]))
        cfg_ft = _trainer_config(hyper, lr, Epochs(1))
        return finetune(model, w_start, ctx.train[cid], ctx.val[cid], cfg_ft,
                        epochs=epochs, lam=lam,
                        seed=client_seed(cfg.seed, 0, pos))

    results = dict(zip(ctx.client_ids,
                       _map_clients(ctx, 0, workers, work)))
    curves = _Curves(ctx.client_ids)
    selector = _Selector()
    for e in range(epochs):
        val_sums = {cid: results[cid].val_losses[e] for cid in ctx.client_ids}
        counts = {cid: ctx.val[cid].n_k for cid in ctx.client_ids}
        trains = {cid: results[cid].train_losses[e] for cid in ctx.client_ids}
        global_val = curves.record(float(hyper["learning_rate"]),
                                   val_sums, counts, trains)
        selector.offer(e, global_val)

    checkpoints = {f"client_{cid}": results[cid].checkpoint.params
                   for cid in ctx.client_ids}
    client_models = {cid: results[cid].checkpoint.params
                     for cid in ctx.client_ids}
    return RunOutcome(curves=curves.rows, best_round=selector.best_round,
                      best_val_loss=selector.best_val,
                      checkpoints=checkpoints, client_models=client_models)


def _run_partial_sharing(ctx: RunContext, workers: int) -> RunOutcome:
    """FedPer / LG-FedAvg: aggregate shared blocks, keep the rest private."""
    cfg = ctx.cfg
    hyper = cfg.hyper
    model = ctx.model
    blocks = [b[0] for b in model.block_layout]
    n_private = hyper.get("n_private")
    if n_private is None:
        n_private = max(1, len(blocks) // 2)
    mask = make_share_mask(blocks, cfg.algorithm, int(n_private))

    w_global = model.init_params(cfg.seed)
    per_client = {cid: w_global for cid in ctx.client_ids}
    lr = float(hyper["learning_rate"])
    best: dict[int, PersonalizedCheckpoint] = {}
    curves = _Curves(ctx.client_ids)
    selector = _Selector()

    for r in range(cfg.rounds):
        cfg_round = _trainer_config(hyper, lr, Epochs(int(hyper["local_epochs"])))

        def work(pos: int, cid: int):
            start = client_round_start(w_global, per_client[cid], mask)
            res = local_update(model, start, ctx.train[cid], cfg_round,
                               seed=client_seed(cfg.seed, r, pos))
            return start, res

        results = _map_clients(ctx, r, workers, work)
        updates = []
        val_sums, val_counts, train_means = {}, {}, {}
        for pos, (cid, (start, res)) in enumerate(zip(ctx.client_ids, results)):
            per_client[cid] = start + res.delta
            updates.append(ClientUpdate(cid, restrict_to_shared(res.delta, mask),
                                        res.steps))
            v = _guard(lambda p, c: local_validate(model, per_client[c],
                                                   ctx.val[c]), pos, cid, r)
            val_sums[cid] = v
            val_counts[cid] = ctx.val[cid].n_k
            train_means[cid] = float(np.mean(res.train_losses))
            if cid not in best or v < best[cid].val_loss:
                best[cid] = PersonalizedCheckpoint(cid, per_client[cid], v, r)
        u = UpdateSet(tuple(updates), tuple(ctx.weights))
        w_global, _ = partial_round(w_global, per_client, u, mask)

        global_val = curves.record(lr, val_sums, val_counts, train_means)
        selector.offer(r, global_val)
        lr = results[0][1].lr_after

    checkpoints = {"final_global_shared": w_global}
    for cid in ctx.client_ids:
        checkpoints[f"client_{cid}"] = best[cid].params
    client_models = {cid: best[cid].params for cid in ctx.client_ids}
    return RunOutcome(curves=curves.rows, best_round=selector.best_round,
                      best_val_loss=selector.best_val,
                      checkpoints=checkpoints, client_models=client_models)


def _run_clustered(ctx: RunContext, workers: int) -> RunOutcome:
    """CFL (scheduled splits from scratch) and prior clustering (finetuning)."""
    cfg = ctx.cfg
    hyper = cfg.hyper
    model = ctx.model
    sizes = {cid: ctx.train[cid].n_k for cid in ctx.client_ids}

    if cfg.algorithm == "cfl":
        schedule = {int(k): tuple(int(c) for c in v)
                    for k, v in (hyper.get("split_schedule") or {}).items()}
        state = initial_cluster_state(ctx.client_ids,
                                      model.init_params(cfg.seed), schedule)
        rounds = cfg.rounds
    else:
        w_start = load_params(hyper["source_checkpoint"])
        if w_start.blocks != model.block_layout:
            raise ConfigError("source checkpoint does not match the task model")
        assignment_cfg = hyper.get("prior_assignment", "grade")
        if assignment_cfg == "grade":
            if ctx.cfg.partition["mode"] != "profile":
                raise ConfigError(
                    "prior_assignment='grade' needs a profile partition; give "
                    "an explicit {client_id: label} map instead")
            rows = ctx.cfg.profile_rows()
            assignment = {cid: lab for cid, lab in
                          prior_grade_assignment(rows).items()}
        else:
            assignment = {int(k): str(v) for k, v in assignment_cfg.items()}
        missing = set(ctx.client_ids) - set(assignment)
        if missing:
            raise ConfigError(f"prior assignment misses clients {sorted(missing)}")
        assignment = {cid: assignment[cid] for cid in ctx.client_ids}
        state = prior_clusters(assignment, w_start,
                               int(hyper["finetune_rounds"]))
        rounds = cfg.rounds

    lr = float(hyper["learning_rate"])
    curves = _Curves(ctx.client_ids)
    selector = _Selector()
    history: list[dict] = [{
        "round": 0, "clusters": {str(c.cluster_id): list(c.members)
                                 for c in state.clusters}}]
    best_snapshot = state

    for r in range(1, rounds + 1):
        cfg_round = _trainer_config(hyper, lr, Epochs(int(hyper["local_epochs"])))
        cluster_of = {cid: c for c in state.clusters for cid in c.members}

        def work(pos: int, cid: int) -> LocalResult:
            return local_update(model, cluster_of[cid].params, ctx.train[cid],
                                cfg_round, seed=client_seed(cfg.seed, r - 1, pos))

        results = dict(zip(ctx.client_ids,
                           _map_clients(ctx, r - 1, workers, work)))
        updates_by_cluster = {}
        for c in state.clusters:
            ups = tuple(ClientUpdate(cid, results[cid].delta, results[cid].steps)
                        for cid in c.members)
            wts = tuple(cluster_weights(c.members, sizes))
            updates_by_cluster[c.cluster_id] = UpdateSet(ups, wts)
        state, diagnostics = scheduled_cfl_round(state, r, updates_by_cluster)
        for diag in diagnostics:
            history.append({"round": r, "split": diag,
                            "clusters": {str(c.cluster_id): list(c.members)
                                         for c in state.clusters}})

        cluster_of = {cid: c for c in state.clusters for cid in c.members}
        val_sums, val_counts = _validate_all(
            ctx, lambda cid: cluster_of[cid].params, r - 1)
        train_means = {cid: float(np.mean(results[cid].train_losses))
                       for cid in ctx.client_ids}
        global_val = curves.record(lr, val_sums, val_counts, train_means)
        if selector.offer(r - 1, global_val):
            best_snapshot = state
        lr = results[ctx.client_ids[0]].lr_after

    checkpoints = {f"cluster_{c.cluster_id}": c.params
                   for c in best_snapshot.clusters}
    cluster_of_best = {cid: c for c in best_snapshot.clusters
                       for cid in c.members}
    client_models = {cid: cluster_of_best[cid].params for cid in ctx.client_ids}
    return RunOutcome(curves=curves.rows, best_round=selector.best_round,
                      best_val_loss=selector.best_val,
                      checkpoints=checkpoints, client_models=client_models,
                      cluster_history=history)


def _evaluate(ctx: RunContext, client_models: Mapping[int, ParamVector]
              ) -> MetricsReport:
    """Per-sample metrics of each client's test split under its final model."""
    rows: list[SampleMetrics] = []
    for cid in ctx.client_ids:
        test = ctx.test[cid]
        if test is None:
            continue
        w = client_models[cid]
        X, Y = test.stacked
        losses = kernels.eval_losses(ctx.model.kind_id, ctx.model.kernel_dims,
                                     w.values, X, Y, ctx.model.dice_eps)
        for i, sample in enumerate(test.samples):
            values: dict[str, float | None] = {"loss": float(losses[i])}
            if ctx.model.kind == VOXEL:
                probs = predict_voxel_probs(ctx.model, w, sample)
                pred = (probs >= 0.5).reshape(ctx.model.grid_shape)
                gt = sample.y.reshape(ctx.model.grid_shape)
                pair = MaskPair(pred, gt)
                values["dice"] = dice_score(pair)
                values["hd95"] = hausdorff95(pair)
            rows.append(SampleMetrics(client_id=cid, sample_index=i,
                                      fold=ctx.fold, values=values))
    return aggregate_report(rows)


def _run_cost(ctx: RunContext) -> costmod.CostReport:
    """Cost accounting of the executed phases only."""
    cfg = ctx.cfg
    consts = cfg.cost_constants()
    sizes = {ds.client_id: ds.n_k for ds in ctx.partition}
    batch = int(cfg.hyper["batch_size"])
    fold = ctx.fold
    alg = cfg.algorithm
    if alg == "centralized":
        phases = [costmod.centralized_plan(sizes, cfg.rounds, consts, batch, fold)]
    elif alg == "local_training":
        phases = [costmod.local_only_plan(sizes, cfg.rounds, consts, batch, fold)]
    elif alg in ("local_finetuning", "ditto"):
        phases = [costmod.local_only_plan(sizes, cfg.rounds, consts, batch, fold)]
    elif alg == "fedavg_fixed_iterations":
        phases = [costmod.fixed_iteration_plan(
            sizes, cfg.rounds, int(cfg.hyper["local_iterations"]), consts,
            batch, fold)]
    elif alg == "scaffold":
        phases = [costmod.fixed_epoch_plan(
            sizes, cfg.rounds, consts, int(cfg.hyper["local_epochs"]), batch,
            payload_multiplier=2.0, fold=fold)]
    elif alg in ("fedper", "lg_fedavg"):
        blocks = [b[0] for b in ctx.model.block_layout]
        n_private = cfg.hyper.get("n_private") or max(1, len(blocks) // 2)
        mask = make_share_mask(blocks, alg, int(n_private))
        shared_dim = sum(length for name, start, length in ctx.model.block_layout
                         if name in mask.shared_blocks)
        frac = shared_dim / ctx.model.dim
        phases = [costmod.fixed_epoch_plan(
            sizes, cfg.rounds, consts, int(cfg.hyper["local_epochs"]), batch,
            shared_fraction=frac, fold=fold)]
    else:
        phases = [costmod.fixed_epoch_plan(
            sizes, cfg.rounds, consts, int(cfg.hyper["local_epochs"]), batch,
            fold=fold)]
    return costmod.accumulate(alg, phases, consts)


_RUNNERS: dict[str, Callable[[RunContext, int], RunOutcome]] = {
    "centralized": _run_centralized,
    "local_training": _run_local_training,
    "fedavg_fixed_epochs": _run_global_family,
    "fedavg_fixed_iterations": _run_global_family,
    "fedavg_uniform": _run_global_family,
    "fednova": _run_global_family,
    "fedadam": _run_global_family,
    "scaffold": _run_global_family,
    "qfedavg": _run_global_family,
    "fedpidavg": _run_global_family,
    "local_finetuning": _run_finetuning,
    "ditto": _run_finetuning,
    "fedper": _run_partial_sharing,
    "lg_fedavg": _run_partial_sharing,
    "cfl": _run_clustered,
    "prior_cfl": _run_clustered,
}


def _jsonready(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonready(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_jsonready(obj), sort_keys=True, separators=(",", ":"))


def content_hash(report: Mapping[str, Any]) -> str:
    payload = {k: v for k, v in report.items()
               if k not in ("content_hash", "kernel_backend")}
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def _params_digest(pv: ParamVector) -> str:
    h = hashlib.sha256()
    h.update(canonical_json(list(pv.blocks)).encode())
    h.update(pv.values.astype("<f8").tobytes())
    return h.hexdigest()


def _metrics_dict(report: MetricsReport) -> dict:
    def stat(s):
        return {"mean": s.mean, "std": s.std, "count": s.count}
    return {
        "overall": {name: stat(s) for name, s in sorted(report.overall.items())},
        "per_institution": {str(cid): {name: stat(s) for name, s in sorted(table.items())}
                            for cid, table in sorted(report.per_institution.items())},
        "samples": [{"client_id": sm.client_id, "sample_index": sm.sample_index,
                     "fold": sm.fold,
                     "values": {k: sm.values[k] for k in sorted(sm.values)}}
                    for sm in report.samples],
    }


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> dict[str, Any]:
    """Execute the configured experiment and return the report dict."""
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    ctx = prepare_context(cfg)
    runner = _RUNNERS[cfg.algorithm]
    outcome = runner(ctx, workers)
    metrics = _evaluate(ctx, outcome.client_models)
    cost = _run_cost(ctx)

    checkpoint_meta = {
        name: {"file": _checkpoint_filename(name, cfg.algorithm),
               "sha256": _params_digest(pv)}
        for name, pv in sorted(outcome.checkpoints.items())}
    report: dict[str, Any] = {
        "schema": SCHEMA_VERSION,
        "algorithm": cfg.algorithm,
        "seed": cfg.seed,
        "rounds": len(outcome.curves["global_val_loss"]),
        "config": cfg.to_dict(),
        "curves": _jsonready(outcome.curves),
        "selection": {"best_round": outcome.best_round,
                      "best_val_loss": outcome.best_val_loss},
        "cluster_history": _jsonready(outcome.cluster_history),
        "metrics": _jsonready(_metrics_dict(metrics)),
        "cost": {
            "algorithm": cost.algorithm,
            "total_steps": cost.total_steps,
            "parallel_steps": cost.parallel_steps,
            "comm_floats": cost.comm_floats,
            "time_seconds": cost.time_seconds,
            "time_hours": cost.time_hours,
        },
        "partition_sizes": {str(ds.client_id): ds.n_k for ds in ctx.partition},
        "checkpoints": checkpoint_meta,
    }
    report = _jsonready(report)
    report["kernel_backend"] = kernels.backend_name()
    report["content_hash"] = content_hash(report)
    report["_checkpoint_params"] = outcome.checkpoints  # stripped when emitted
    return report


def run_centralized(cfg: ExperimentConfig, workers: int = 1) -> dict[str, Any]:
    """Pooled-data baseline; same trainer configuration, single virtual client."""
    if cfg.algorithm != "centralized":
        from dataclasses import replace
        cfg = replace(cfg, algorithm="centralized")
    return run_experiment(cfg, workers)


def _checkpoint_filename(name: str, algorithm: str) -> str:
    if name.startswith("client_"):
        return f"{name}_{algorithm}.params"
    return f"{name}.params"


def emit_report(report: Mapping[str, Any], out_dir) -> list[str]:
    """Write report.json, metrics.csv, cost.csv, curves.csv and checkpoints."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[str] = []

    params = report.get("_checkpoint_params") or {}
    public = {k: v for k, v in report.items() if not k.startswith("_")}

    path = out / "report.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_jsonready(public), f, indent=2, sort_keys=True)
        f.write("\n")
    written.append(str(path))

    metric_names = sorted(public["metrics"]["overall"])
    path = out / "metrics.csv"
    with open(path, "w", newline="", encoding="utf-8") as f:
        wr = csv.writer(f)
        wr.writerow(["client_id", "sample_index", "fold"] + metric_names)
        for row in public["metrics"]["samples"]:
            vals = [row["values"].get(m) for m in metric_names]
            wr.writerow([row["client_id"], row["sample_index"], row["fold"]]
                        + ["" if v is None else repr(v) for v in vals])
    written.append(str(path))

    path = out / "cost.csv"
    with open(path, "w", newline="", encoding="utf-8") as f:
        wr = csv.writer(f)
        cost = public["cost"]
        wr.writerow(["algorithm", "total_steps", "parallel_steps",
                     "comm_floats", "time_seconds", "time_hours"])
        wr.writerow([cost["algorithm"], cost["total_steps"],
                     cost["parallel_steps"], repr(cost["comm_floats"]),
                     repr(cost["time_seconds"]), repr(cost["time_hours"])])
    written.append(str(path))

    path = out / "curves.csv"
    with open(path, "w", newline="", encoding="utf-8") as f:
        wr = csv.writer(f)
        wr.writerow(["round", "series", "value"])
        for series in sorted(public["curves"]):
            for r, v in enumerate(public["curves"][series]):
                wr.writerow([r, series, repr(v)])
    written.append(str(path))

    ckpt_dir = out / "checkpoints"
    if params:
        ckpt_dir.mkdir(exist_ok=True)
    for name, pv in sorted(params.items()):
        path = ckpt_dir / _checkpoint_filename(name, public["algorithm"])
        save_params(path, pv)
        written.append(str(path))
    return written


def load_report(path) -> dict[str, Any]:
    """Read back a report.json (directory or file path)."""
    p = Path(path)
    if p.is_dir():
        p = p / "report.json"
    with open(p, "r", encoding="utf-8") as f:
        return json.load(f)
