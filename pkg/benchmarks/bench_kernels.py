"""Compare the numba kernels with their pure-numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--n 2000] [--repeats 5]

Each kernel is called once to trigger compilation, then timed as the best of
``--repeats`` calls. Outputs of both paths are checked to agree.
"""

import argparse
import time

import numpy as np

from prefpose import _kernels as K
from prefpose.skeleton import default_topology


def best_of(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(n, rng):
    topo = default_topology()
    ang = rng.normal(size=(n, topo.num_joints, 3)) * 0.3
    root = rng.normal(size=(n, 3)) * 100
    fk_args = (ang, root, topo.parent.astype(np.int64), topo.bone_length_mm, topo.rest_direction)
    mats = rng.normal(size=(n, 3, 3))
    ranks = rng.integers(0, n // 4 + 1, size=n).astype(np.float64)
    x = rng.normal(size=(n, 16, 3)) * 200
    y = x + rng.normal(size=x.shape) * 40
    return {
        "fk": (lambda: K.forward_kinematics_batch(*fk_args), lambda: K.numpy_impls["fk"](*fk_args)),
        "svd3": (lambda: K.svd3_batch(mats)[1], lambda: K.numpy_impls["svd3"](mats)[1]),
        "rank": (lambda: K.average_ranks(ranks), lambda: K.numpy_impls["rank"](ranks)),
        "align": (
            lambda: K.align_about_origin(x, y)[2],
            lambda: K.numpy_impls["align"](x, y, K.ALIGN_MAX_ITERS, K.ALIGN_TOL)[2],
        ),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=2000, help="batch size")
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba path disabled (PREFPOSE_PURE_NUMPY set or numba missing); nothing to compare")
        return
    print(f"{'kernel':<8}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}{'max diff':>11}")
    for name, (fast, slow) in cases(args.n, np.random.default_rng(0)).items():
        diff = np.abs(np.asarray(fast()) - np.asarray(slow())).max()
        tf = best_of(fast, args.repeats)
        ts = best_of(slow, args.repeats)
        print(f"{name:<8}{1e3 * tf:>10.2f}{1e3 * ts:>10.2f}{ts / tf:>8.1f}x{diff:>11.1e}")


if __name__ == "__main__":
    main()
