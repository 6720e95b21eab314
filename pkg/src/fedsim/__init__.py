"""fedsim: deterministic desk-scale simulation of cross-silo federated
optimization — aggregation rules, personalization, clustering, segmentation
metrics, the federated cross-validation protocol and the training cost
model, on synthetic differentiable tasks."""

from .config import ExperimentConfig, load_config, parse_config
from .harness import emit_report, load_report, run_centralized, run_experiment
from .params import (ClientUpdate, ParamVector, UpdateSet, combine,
                     cosine_similarity, load_params, masked_overwrite,
                     save_params)
from .tasks import ClientDataset, Sample, TaskModel

__version__ = "0.1.0"

__all__ = [
    "ClientDataset", "ClientUpdate", "ExperimentConfig", "ParamVector",
    "Sample", "TaskModel", "UpdateSet", "combine", "cosine_similarity",
    "emit_report", "load_config", "load_params", "load_report",
    "masked_overwrite", "parse_config", "run_centralized", "run_experiment",
    "save_params", "__version__",
]
