"""Time the compiled and pure-numpy MLP kernels on local-training sized batches.

    python benchmarks/bench_kernels.py [--repeat 200]
"""
import argparse
import time

import numpy as np

from dynafed.kernels import HAVE_COMPILED, get_backend, sizes_array


def bench(backend, sizes, n, repeat, rng):
    X = rng.standard_normal((n, sizes[0]))
    T = np.eye(sizes[-1])[rng.integers(0, sizes[-1], n)]
    n_params = sum(i * o + o for i, o in zip(sizes[:-1], sizes[1:]))
    params = 0.1 * rng.standard_normal(n_params)
    g = np.empty(n_params)
    m = np.zeros(n_params)
    v = np.zeros(n_params)
    sa = sizes_array(sizes)
    backend.mlp_loss_grad(params, sa, X, T, g)
    t0 = time.perf_counter()
    for k in range(repeat):
        backend.mlp_loss_grad(params, sa, X, T, g)
        backend.adam_step(params, g, m, v, k + 1, 1e-3, 0.9, 0.999, 1e-8)
    return (time.perf_counter() - t0) / repeat * 1e6


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    backends = [get_backend("python")]
    if HAVE_COMPILED:
        backends.append(get_backend("compiled"))
    else:
        print("compiled kernels not built; only the numpy fallback is timed")
    cases = [((2, 64, 5), 8), ((2, 64, 5), 64), ((784, 128, 10), 64), ((784, 256, 128, 10), 64)]
    print(f"{'layers':>22s} {'batch':>5s} " + " ".join(f"{b.name + ' us':>12s}" for b in backends) + "  speedup")
    for sizes, n in cases:
        times = [bench(b, sizes, n, args.repeat, np.random.default_rng(0)) for b in backends]
        speed = f"{times[0] / times[-1]:7.2f}x" if len(times) > 1 else ""
        print(f"{str(sizes):>22s} {n:5d} " + " ".join(f"{t:12.1f}" for t in times) + "  " + speed)


if __name__ == "__main__":
    main()
