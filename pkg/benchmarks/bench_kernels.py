"""Timing comparison of the numba kernels against the pure-numpy fallback.

Run from the repository root:

    python benchmarks/bench_kernels.py [--points 4096] [--repeats 30]

The same primitives back the tracker's hot paths (sampling, grouping,
membership, voxel pooling, fused dense layers), so the table below is a good
proxy for end-to-end speedup of ``OPSTRACK_KERNELS=numba`` over
``OPSTRACK_KERNELS=numpy``.
"""

import argparse
import time

import numpy as np

from opstrack import kernels


def timeit(fn, repeats):
    fn()  # warm (includes jit compilation on the numba path)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def build_cases(n_points, rng):
    pts = rng.uniform(-4, 4, size=(n_points, 3))
    centers = pts[:: max(1, n_points // 256)][:256]
    values = rng.normal(size=(n_points, 64)).astype(np.float32)
    cells = rng.integers(0, 1024, size=n_points)
    z = rng.normal(size=(n_points, 128)).astype(np.float32)
    gamma = np.ones(128, dtype=np.float32)
    beta = np.zeros(128, dtype=np.float32)
    g = rng.normal(size=z.shape).astype(np.float32)

    def bn_pair():
        out, xhat, std, _, _ = kernels.bn_act_train_fwd(z, gamma, beta, 1e-5,
                                                        kernels.ACT_RELU)
        kernels.bn_act_bwd(g, out, xhat, std, gamma, kernels.ACT_RELU, True)

    return {
        "furthest_point_indices (k=n/2)":
            lambda: kernels.furthest_point_indices(pts, n_points // 2),
        "ball_query (256 centers, s=16)":
            lambda: kernels.ball_query(centers, pts, 0.7, 16),
        "box_mask":
            lambda: kernels.box_mask(pts, (0.0, 0.0, 0.0), (3.9, 1.6, 1.5), 0.4),
        "scatter_add (64ch)":
            lambda: kernels.scatter_add(values, cells, 1024),
        "bn_act fwd+bwd (128ch)": bn_pair,
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--points", type=int, default=4096)
    parser.add_argument("--repeats", type=int, default=30)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    cases = build_cases(args.points, rng)
    backends = ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else [])
    results = {}
    for backend in backends:
        kernels.set_backend(backend)
        results[backend] = {name: timeit(fn, args.repeats)
                            for name, fn in cases.items()}

    width = max(len(n) for n in cases) + 2
    header = f"{'kernel'.ljust(width)}" + "".join(f"{b:>12}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for name in cases:
        row = name.ljust(width)
        for backend in backends:
            row += f"{results[backend][name] * 1e3:>10.3f}ms"
        if len(backends) == 2:
            ratio = results["numpy"][name] / results["numba"][name]
            row += f"{ratio:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
