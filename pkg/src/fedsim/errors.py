"""Exception types shared across the simulator."""

from __future__ import annotations


class FedsimError(Exception):
    """Base class for simulator errors."""


class ConfigError(FedsimError):
    """Invalid experiment configuration (CLI exit code 2)."""


class DimensionMismatchError(FedsimError):
    """Parameter vectors with incompatible dimensions or block maps.

    ``index`` identifies the offending entry (client position) when the
    mismatch was detected inside a reduction over clients.
    """

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class UnknownBlockError(FedsimError):
    """A block name not present in the parameter block map."""


class ZeroNormError(FedsimError):
    """Zero-norm vector where a direction is required (cosine similarity)."""

    def __init__(self, message: str, client_id: int | None = None):
        super().__init__(message)
        self.client_id = client_id


class PartitionError(FedsimError):
    """Unsatisfiable partition request; ``deficits`` lists (class, short_by)."""

    def __init__(self, message: str, deficits: list[tuple[str, int]] | None = None):
        super().__init__(message)
        self.deficits = deficits or []


class NonFiniteLossError(FedsimError):
    """NaN/Inf encountered during training or evaluation."""

    def __init__(self, message: str, step_index: int | None = None,
                 sample_index: int | None = None):
        super().__init__(message)
        self.step_index = step_index
        self.sample_index = sample_index


class ClusteringError(FedsimError):
    """Invalid cluster operation (singleton split, oversized bipartition...)."""
