"""Experiment configuration: JSON schema, per-algorithm defaults, validation.

A config file is a JSON object with ``task``, ``partition``, ``algorithm``,
``folds``, ``rounds`` and ``seed`` entries; every hyperparameter has a
documented default (mirroring the benchmark's selected values) and can be
overridden. See README.md for the full schema.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Any, Mapping

from .cost import CostConstants
from .errors import ConfigError
from .profiles import BUILTIN_PROFILES
from .tasks import (LINEAR, LOGISTIC, MLP, VOXEL, TaskModel, linear_regression,
                    logistic_regression, mlp_1hidden, voxel_dice)

ALGORITHMS = (
    "centralized",
    "local_training",
    "fedavg_fixed_epochs",
    "fedavg_fixed_iterations",
    "fedavg_uniform",
    "fednova",
    "fedadam",
    "scaffold",
    "qfedavg",
    "fedpidavg",
    "local_finetuning",
    "ditto",
    "fedper",
    "lg_fedavg",
    "cfl",
    "prior_cfl",
)

FINETUNE_ALGORITHMS = ("local_finetuning", "ditto", "prior_cfl")

# selected values of the benchmark's hyperparameter search (challenge setup)
DEFAULT_LEARNING_RATE = {
    "centralized": 0.1,
    "local_training": 0.1,
    "fedavg_fixed_epochs": 0.4,
    "fedavg_fixed_iterations": 0.4,
    "fedavg_uniform": 0.4,
    "fednova": 0.2,
    "fedadam": 0.1,
    "scaffold": 0.4,
    "qfedavg": 0.4,
    "fedpidavg": 0.4,
    "local_finetuning": 0.1,
    "ditto": 0.1,
    "fedper": 0.4,
    "lg_fedavg": 0.2,
    "cfl": 0.4,
    "prior_cfl": 0.1,
}

DEFAULT_ROUNDS = {"fedavg_fixed_iterations": 720,
                  "local_finetuning": 30, "ditto": 30, "prior_cfl": 30}

HYPERPARAMETER_RANGES = {
    "learning_rate": (0.0, 10.0),
    "batch_size": (1, 4096),
    "weight_decay": (0.0, 1.0),
    "lr_decay_factor": (0.0, 1.0),
    "local_epochs": (1, 1000),
    "local_iterations": (1, 100000),
    "server_lr": (0.0, 10.0),
    "beta1": (0.0, 1.0),
    "beta2": (0.0, 1.0),
    "tau": (0.0, 1.0),
    "q": (0.0, 16.0),
    "alpha": (0.0, 1.0),
    "beta": (0.0, 1.0),
    "gamma": (0.0, 1.0),
    "lambda": (0.0, 1e7),
    "finetune_epochs": (0, 10000),
    "finetune_rounds": (1, 100000),
    "n_private": (1, 1024),
}


def algorithm_defaults(algorithm: str) -> dict[str, Any]:
    """Full hyperparameter block for one algorithm."""
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {algorithm!r}; choose from {ALGORITHMS}")
    d: dict[str, Any] = {
        "learning_rate": DEFAULT_LEARNING_RATE[algorithm],
        "batch_size": 4,
        "weight_decay": 1e-5,
        # exponential decay per epoch/round; the fairness-weighted rule keeps
        # a constant rate because eta appears in its aggregation formula
        "lr_decay_factor": 1.0 if algorithm == "qfedavg" else 0.995,
        "local_epochs": 1,
    }
    if algorithm == "fedavg_fixed_iterations":
        d["local_iterations"] = 10
    if algorithm == "fedadam":
        d.update(server_lr=0.001, beta1=0.9, beta2=0.999, tau=1e-8)
    if algorithm == "qfedavg":
        d["q"] = 1.0
    if algorithm == "fedpidavg":
        d.update(alpha=0.45, beta=0.45, gamma=0.1)
    if algorithm == "ditto":
        d["lambda"] = 0.01
    if algorithm in ("local_finetuning", "ditto"):
        d.update(finetune_epochs=30, per_client_lr={})
    if algorithm in ("fedper", "lg_fedavg"):
        d["n_private"] = None  # resolved against the model's block count
    if algorithm == "cfl":
        d["split_schedule"] = {"200": [0]}
    if algorithm == "prior_cfl":
        d.update(finetune_rounds=30, prior_assignment="grade")
    if algorithm in FINETUNE_ALGORITHMS:
        d.setdefault("source_checkpoint", None)
    return d


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description."""

    algorithm: str
    seed: int
    rounds: int
    task: dict[str, Any]
    partition: dict[str, Any]
    folds: dict[str, Any]
    hyper: dict[str, Any]
    cost: dict[str, Any] = field(default_factory=dict)
    name: str = ""
    output_dir: str | None = None

    def task_model(self) -> TaskModel:
        t = self.task
        kind = t["kind"]
        if kind == LINEAR:
            return linear_regression(t["n_features"])
        if kind == LOGISTIC:
            return logistic_regression(t["n_features"])
        if kind == MLP:
            return mlp_1hidden(t["n_features"], t.get("hidden", 8),
                               t.get("n_outputs", 1))
        return voxel_dice(tuple(t.get("grid_shape", (8, 8, 8))),
                          t.get("voxel_features", 4), t.get("dice_eps", 1.0))

    def profile_rows(self) -> list[tuple[int, int, Mapping[str, int] | None]]:
        p = self.partition
        if p["mode"] != "profile":
            raise ConfigError("profile_rows only applies to profile partitions")
        prof = p["profile"]
        if isinstance(prof, str):
            rows = BUILTIN_PROFILES[prof]
        else:
            rows = tuple((int(cid), int(count), (dict(mix) if mix else None))
                         for cid, count, mix in prof)
        return list(rows)

    def cost_constants(self) -> CostConstants:
        return CostConstants(**self.cost)

    def to_dict(self) -> dict[str, Any]:
        """Echo used in reports; excludes runtime-only fields (output_dir)."""
        return copy.deepcopy({
            "name": self.name,
            "algorithm": self.algorithm,
            "seed": self.seed,
            "rounds": self.rounds,
            "task": self.task,
            "partition": self.partition,
            "folds": self.folds,
            "hyperparameters": self.hyper,
            "cost": self.cost,
        })


def _check_range(name: str, value) -> None:
    bounds = HYPERPARAMETER_RANGES.get(name)
    if bounds is None or value is None:
        return
    lo, hi = bounds
    if not (lo <= value <= hi):
        raise ConfigError(f"hyperparameter {name}={value!r} outside [{lo}, {hi}]")


def parse_config(raw: Mapping[str, Any]) -> ExperimentConfig:
    """Validate a raw JSON object and fill in defaults."""
    try:
        algorithm = raw["algorithm"]["id"] if isinstance(raw.get("algorithm"), dict) \
            else raw["algorithm"]
    except KeyError:
        raise ConfigError("config needs an 'algorithm' entry")
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {algorithm!r}; choose from {ALGORITHMS}")

    hyper = algorithm_defaults(algorithm)
    if isinstance(raw.get("algorithm"), dict):
        overrides = {k: v for k, v in raw["algorithm"].items() if k != "id"}
        unknown = set(overrides) - set(hyper)
        if unknown:
            raise ConfigError(
                f"unknown hyperparameters for {algorithm}: {sorted(unknown)}")
        hyper.update(overrides)
    for key, value in hyper.items():
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            _check_range(key, value)

    task = dict(raw.get("task") or {"kind": "logistic_regression", "n_features": 10})
    if task.get("kind") not in (LINEAR, LOGISTIC, MLP, VOXEL):
        raise ConfigError(f"unknown task kind {task.get('kind')!r}")
    if task["kind"] != VOXEL and int(task.get("n_features", 0)) < 1:
        raise ConfigError("task.n_features must be >= 1")
    task.setdefault("pool", {})

    partition = dict(raw.get("partition") or
                     {"mode": "profile", "profile": "fets2022_challenge"})
    mode = partition.get("mode")
    if mode not in ("iid", "profile"):
        raise ConfigError(f"partition.mode must be 'iid' or 'profile', not {mode!r}")
    if mode == "iid" and int(partition.get("clients", 0)) < 1:
        raise ConfigError("iid partitions need partition.clients >= 1")
    if mode == "profile":
        prof = partition.get("profile")
        if isinstance(prof, str):
            if prof not in BUILTIN_PROFILES:
                raise ConfigError(
                    f"unknown profile {prof!r}; built-ins: {sorted(BUILTIN_PROFILES)}")
        elif not isinstance(prof, (list, tuple)) or not prof:
            raise ConfigError("partition.profile must name a built-in profile "
                              "or list [client_id, count, class_mix] rows")
    partition.setdefault("feature_shift", 0.0)

    folds = dict(raw.get("folds") or {})
    folds.setdefault("n_folds", 5)
    folds.setdefault("val_frac", 0.2)
    folds.setdefault("fold", 0)
    if not 0 <= int(folds["fold"]) < int(folds["n_folds"]):
        raise ConfigError(f"fold {folds['fold']} outside 0..{folds['n_folds'] - 1}")
    if not 0.0 < float(folds["val_frac"]) < 1.0:
        raise ConfigError("folds.val_frac must be in (0, 1)")

    rounds = int(raw.get("rounds", DEFAULT_ROUNDS.get(algorithm, 300)))
    if rounds < 1:
        raise ConfigError("rounds must be >= 1")
    seed = int(raw.get("seed", 0))

    cost = dict(raw.get("cost") or {})
    try:
        CostConstants(**cost)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid cost constants: {exc}")

    if algorithm in FINETUNE_ALGORITHMS and not hyper.get("source_checkpoint"):
        raise ConfigError(
            f"{algorithm} starts from a converged global model; set "
            "algorithm.source_checkpoint to a .params file")

    return ExperimentConfig(
        algorithm=algorithm, seed=seed, rounds=rounds, task=task,
        partition=partition, folds=folds, hyper=hyper, cost=cost,
        name=str(raw.get("name", "")), output_dir=raw.get("output_dir"))


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return parse_config(raw)
