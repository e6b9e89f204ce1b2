"""Compare the compiled element kernels with the NumPy fallback.

    python3 benchmarks/bench_kernels.py [--k 1] [--n 16] [--repeat 5]

Both backends get identical inputs taken from a real discretization; the
script checks they agree and prints the best time of each.
"""
import argparse
import timeit

import numpy as np

from hybridns import _kernels_py
from hybridns.mesh import build_structured_mesh
from hybridns.solver import Discretization

try:
    from hybridns import _ckernels
except ImportError:
    _ckernels = None


def inputs(k, n, seed=0):
    disc = Discretization(build_structured_mesh(n), k)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((disc.mesh.n_elements, disc.n_uloc))
    w = np.ascontiguousarray(v[:, :disc.n_rtn])
    conv = (disc.wphi, disc.phi, disc.dphi, disc.ftn, disc.fwh, disc.sflat, disc.dflat, w, v)
    return conv, (disc.samples, w)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)

    conv, linf = inputs(args.k, args.n)
    backends = {"numpy": _kernels_py}
    if _ckernels is not None:
        backends["cython"] = _ckernels
    else:
        print("compiled extension not built; timing the NumPy path only")

    print(f"k={args.k} n={args.n} elements={conv[1].shape[0]}")
    ref = {name: None for name in ("convection", "linf_norms")}
    for label, mod in backends.items():
        for name, data in (("convection", conv), ("linf_norms", linf)):
            fn = getattr(mod, name)
            out = fn(*data)
            best = min(timeit.repeat(lambda: fn(*data), number=1, repeat=args.repeat))
            line = f"{label:>7} {name:<11} {best * 1e3:9.2f} ms"
            if ref[name] is None:
                ref[name] = out
            else:
                a = out if isinstance(out, tuple) else (out,)
                b = ref[name] if isinstance(ref[name], tuple) else (ref[name],)
                err = max(np.abs(x - y).max() / max(np.abs(y).max(), 1.0) for x, y in zip(a, b))
                line += f"   (max rel. difference vs numpy {err:.1e})"
            print(line)


if __name__ == "__main__":
    main()
