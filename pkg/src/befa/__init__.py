"""Behavior-gated feature adapters for content-aware recommenders."""
import os as _os

# BEFA_THREADS caps BLAS/OpenMP threads; it only takes effect when this
# package is imported before numpy (as the command-line entry point does).
if _os.environ.get("BEFA_THREADS"):
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["BEFA_THREADS"])

__version__ = "0.1.0"
