"""Backend selection for the hot Sinkhorn loop.

The compiled extension is used when importable; set ``SELMAG_PURE_PYTHON=1``
to force the numpy fallback.
"""

from __future__ import annotations

import os

from . import _kernels_py as python_impl

try:
    from . import _kernels as compiled_impl
except ImportError:  # extension not built
    compiled_impl = None

if compiled_impl is not None and not os.environ.get("SELMAG_PURE_PYTHON"):
    BACKEND = "cython"
    sinkhorn_scaling = compiled_impl.sinkhorn_scaling
else:
    BACKEND = "python"
    sinkhorn_scaling = python_impl.sinkhorn_scaling

__all__ = ["BACKEND", "sinkhorn_scaling", "python_impl", "compiled_impl"]
