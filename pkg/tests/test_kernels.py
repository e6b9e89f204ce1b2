import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import discretization
from hybridns import _kernels_py, kernels

try:
    from hybridns import _ckernels
except ImportError:
    _ckernels = None

needs_ext = pytest.mark.skipif(_ckernels is None, reason="compiled extension not built")


def _inputs(k, n=3, seed=5):
    disc = discretization(k, n)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((disc.mesh.n_elements, disc.n_uloc))
    w = np.ascontiguousarray(v[:, :disc.n_rtn])
    return disc, (disc.wphi, disc.phi, disc.dphi, disc.ftn, disc.fwh, disc.sflat, disc.dflat, w, v)


@needs_ext
@pytest.mark.parametrize("k", [0, 1, 2])
def test_compiled_convection_matches_numpy(k):
    _, args = _inputs(k)
    for a, b in zip(_ckernels.convection(*args), _kernels_py.convection(*args)):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


@needs_ext
@pytest.mark.parametrize("k", [0, 1, 2])
def test_compiled_linf_matches_numpy(k):
    disc, args = _inputs(k)
    w = args[-2]
    np.testing.assert_allclose(_ckernels.linf_norms(disc.samples, w),
                               _kernels_py.linf_norms(disc.samples, w), rtol=1e-14)


def test_linf_norms_against_direct_sampling(k):
    disc, args = _inputs(k)
    w = args[-2]
    vals = np.einsum("esjc,ej->esc", disc.samples, w)
    direct = np.linalg.norm(vals, axis=-1).max(axis=1)
    np.testing.assert_allclose(kernels.linf_norms(disc.samples, w), direct, rtol=1e-13)


def test_backend_reported():
    assert kernels.BACKEND in ("numpy", "cython")
    if _ckernels is not None and os.environ.get("HYBRIDNS_PURE_PYTHON", "") == "":
        assert kernels.BACKEND == "cython"


def test_pure_python_switch():
    env = dict(os.environ, HYBRIDNS_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import hybridns; print(hybridns.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
