"""Benchmark the numba kernels against the pure-numpy fallback.

Runs the two hot paths of the pipeline -- backward trilinear warping and
inverse-distance blending of rigid fields -- on synthetic volumes and prints
per-backend timings. The numba kernels are warmed up once so JIT compilation
is excluded.

Usage: python benchmarks/bench_kernels.py [--dims 192 96 256] [--repeats 5]
"""

import argparse
import time

import numpy as np

from spinewarp import _kernels_numpy


def make_inputs(dims, rng):
    origin = np.zeros(3)
    spacing = np.ones(3)
    data = (rng.normal(size=dims) * 400.0).astype(np.float32)
    vec = rng.normal(size=dims + (3,)) * 3.0

    J = 6
    dmaps = rng.uniform(0.1, 40.0, size=(J,) + dims)
    member = np.full(dims, -1, dtype=np.int32)
    for j in range(J):
        member[:, :, j * 4 : j * 4 + 3] = j
        dmaps[j][member == j] = 0.0
    from scipy.spatial.transform import Rotation

    rots = Rotation.random(J, random_state=np.random.RandomState(0)).as_matrix()
    amats = np.ascontiguousarray(rots - np.eye(3))
    bvecs = rng.uniform(-10, 10, size=(J, 3))
    return {
        "warp": (data, origin, spacing, vec, origin, spacing, -1000.0),
        "blend": (amats, bvecs, dmaps, member, origin, spacing, 1e-9),
    }


def best_of(fn, args, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--dims", type=int, nargs=3, default=[192, 96, 256])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    dims = tuple(args.dims)
    rng = np.random.Generator(np.random.PCG64(args.seed))
    inputs = make_inputs(dims, rng)

    backends = {"numpy": _kernels_numpy}
    try:
        from spinewarp import _kernels_numba

        # warm up the JIT so compile time is not measured
        small = make_inputs((8, 8, 8), np.random.Generator(np.random.PCG64(1)))
        _kernels_numba.warp_trilinear(*small["warp"])
        _kernels_numba.blend_affine(*small["blend"])
        backends["numba"] = _kernels_numba
    except ImportError:
        print("numba not importable; benchmarking the numpy backend only")

    voxels = int(np.prod(dims))
    print(f"volume {dims[0]}x{dims[1]}x{dims[2]} ({voxels / 1e6:.1f} M voxels), "
          f"best of {args.repeats}\n")
    print(f"{'kernel':>16} {'backend':>8} {'seconds':>10} {'Mvox/s':>10}")
    results = {}
    for name, fn_name in (("warp_trilinear", "warp"), ("blend_affine", "blend")):
        for backend, mod in backends.items():
            t = best_of(getattr(mod, name), inputs[fn_name], args.repeats)
            results[(name, backend)] = t
            print(f"{name:>16} {backend:>8} {t:>10.3f} {voxels / t / 1e6:>10.1f}")
    if "numba" in backends:
        for name in ("warp_trilinear", "blend_affine"):
            speedup = results[(name, "numpy")] / results[(name, "numba")]
            print(f"\n{name}: numba is {speedup:.1f}x the numpy backend")


if __name__ == "__main__":
    main()
