"""Hot-loop kernels with a compiled core and a pure numpy fallback.

The compiled extension (`liftdig.kernels._core`, built from Cython) is
preferred when importable. Selection can be forced with the environment
variable LIFTDIG_KERNELS=c or LIFTDIG_KERNELS=py; forcing "c" raises if
the extension is unavailable. `benchmarks/bench_kernels.py` compares the
two backends on representative workloads.
"""

import importlib
import os

from . import _py
from ._py import DIVERGENCE_LIMIT, SIM_PARAM_NAMES

_requested = os.environ.get("LIFTDIG_KERNELS", "").strip().lower()
if _requested not in ("", "c", "py"):
    raise RuntimeError(
        f"LIFTDIG_KERNELS must be 'c' or 'py', got {_requested!r}")

_core = None
if _requested != "py":
    try:
        _core = importlib.import_module("._core", __name__)
    except ImportError:
        if _requested == "c":
            raise RuntimeError(
                "LIFTDIG_KERNELS=c but the compiled kernel extension is "
                "not built; run `pip install -e .` or `python setup.py "
                "build_ext --inplace`") from None

BACKEND = "c" if _core is not None else "py"
_impl = _core if _core is not None else _py

spline_eval = _impl.spline_eval
sim_substeps = _impl.sim_substeps
lifted_rollout = _impl.lifted_rollout
admm_run = _impl.admm_run


def get_backend(name=None):
    """Return the kernel module for `name` ('c' or 'py'); default active."""
    if name is None:
        return _impl
    if name == "py":
        return _py
    if name == "c":
        if _core is None:
            raise RuntimeError("compiled kernel extension not available")
        return _core
    raise ValueError(f"unknown kernel backend {name!r}")


__all__ = [
    "BACKEND", "DIVERGENCE_LIMIT", "SIM_PARAM_NAMES", "admm_run",
    "get_backend", "lifted_rollout", "sim_substeps", "spline_eval",
]
