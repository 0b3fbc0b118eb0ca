"""Time the numba kernels against their numpy fallbacks.

Run: python3 benchmarks/bench_kernels.py --repeats 5
Each kernel is compiled (or loaded from cache) once before timing, and the
two backends are checked for agreement on the benchmark inputs.
"""

import argparse
import time

import numpy as np

from arft import _kernels as K


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def relieff_args(n, p, rng):
    x = rng.normal(size=(n, p))
    x = (x - x.min(0)) / (x.max(0) - x.min(0))
    y = (rng.random(n) < 0.1).astype(np.int64)
    counts = np.bincount(y, minlength=2)
    k = 10
    return (x, y, np.arange(n), np.minimum(k, counts - 1), np.minimum(k, counts), counts / n)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if not K._NUMBA_IMPORTED:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(args.seed)

    cases = []
    for n in (128, 512):
        z = rng.normal(size=(n, 32))
        cases.append((f"pairwise_distances n={n} d=32",
                      lambda z=z: K.pairwise_distances_numpy(z), lambda z=z: K.pairwise_distances_numba(z)))
    for n in (1_000, 100_000):
        x = np.round(rng.normal(size=n), 2)
        cases.append((f"midranks n={n}", lambda x=x: K.midranks_numpy(x), lambda x=x: K.midranks_numba(x)))
    for n, p in ((730, 52), (2000, 52)):
        ra = relieff_args(n, p, rng)
        cases.append((f"relieff n={n} p={p} k=10",
                      lambda ra=ra: K.relieff_numpy(*ra), lambda ra=ra: K.relieff_numba(*ra)))

    print(f"{'kernel':<32}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}{'max |diff|':>14}")
    for name, np_fn, nb_fn in cases:
        diff = float(np.max(np.abs(np_fn() - nb_fn())))  # also warms the jit cache
        t_np = best_of(np_fn, args.repeats)
        t_nb = best_of(nb_fn, args.repeats)
        print(f"{name:<32}{1e3 * t_np:>12.2f}{1e3 * t_nb:>12.2f}{t_np / t_nb:>9.1f}x{diff:>14.1e}")


if __name__ == "__main__":
    main()
