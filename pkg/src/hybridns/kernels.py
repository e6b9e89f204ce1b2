"""Hot element kernels: compiled extension when available, NumPy otherwise.

Set ``HYBRIDNS_PURE_PYTHON=1`` to force the NumPy path.
"""
import os

from . import _kernels_py

BACKEND = "numpy"
convection = _kernels_py.convection
linf_norms = _kernels_py.linf_norms

if os.environ.get("HYBRIDNS_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        pass
    else:
        convection = _ckernels.convection
        linf_norms = _ckernels.linf_norms
        BACKEND = "cython"
