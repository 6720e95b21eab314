"""Kernel backend selection.

The hot inner loops (per-step gradients and SGD updates) exist twice: a
Cython extension (`fedsim.kernels._speedups`) and a pure-numpy fallback
(`fedsim.kernels.fallback`). The compiled backend is used when it imports;
set FEDSIM_KERNELS=python to force the fallback or FEDSIM_KERNELS=compiled
to require the extension. Both implement identical float64 semantics; tiny
last-ulp differences can remain because reduction orders differ, so every
run records which backend produced it.
"""

from __future__ import annotations

import os

from . import fallback
from .fallback import KIND_LINEAR, KIND_LOGISTIC, KIND_MLP, KIND_VOXEL

_choice = os.environ.get("FEDSIM_KERNELS", "auto").lower()

if _choice not in ("auto", "python", "compiled"):
    raise ValueError(f"FEDSIM_KERNELS={_choice!r}: use auto, python or compiled")

_impl = None
if _choice in ("auto", "compiled"):
    try:
        from . import _speedups as _impl  # type: ignore[attr-defined]
    except ImportError:
        if _choice == "compiled":
            raise ImportError(
                "FEDSIM_KERNELS=compiled but fedsim.kernels._speedups is not "
                "built; reinstall with a C compiler or use FEDSIM_KERNELS=python")
        _impl = None
if _impl is None:
    _impl = fallback

batch_grad = _impl.batch_grad
eval_losses = _impl.eval_losses
sgd_run = _impl.sgd_run


def backend_name() -> str:
    """Name of the active kernel backend: 'compiled' or 'python'."""
    return _impl.BACKEND


def available_backends() -> list[str]:
    names = ["python"]
    try:
        from . import _speedups  # noqa: F401
        names.insert(0, "compiled")
    except ImportError:
        pass
    return names


def get_backend(name: str):
    """Return the kernel module for an explicit backend name."""
    if name == "python":
        return fallback
    if name == "compiled":
        from . import _speedups
        return _speedups
    raise ValueError(f"unknown kernel backend {name!r}")
