"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--seconds 3600] [--replicas 64] [--repeat 5]

Both paths are imported directly, so the script works regardless of
ECOHARNESS_NO_NUMBA. Results are checked for equality before timing.
"""

import argparse
import timeit

import numpy as np

from ecoharness import kernels


def make_inputs(T, R, seed=0):
    rng = np.random.default_rng(seed)
    cpu_lim = rng.choice([250.0, 500.0, 1000.0], R)
    mem_lim = rng.choice([2.0**28, 2.0**29], R)
    cpu = rng.uniform(0, 1.1, (T, R)) * cpu_lim
    mem = rng.uniform(0, 1.1, (T, R)) * mem_lim
    dead = rng.random((T, R)) < 0.1
    cpu[dead] = np.nan
    mem[dead] = np.nan
    group = rng.integers(0, max(1, R // 4), R).astype(np.int64)
    n_samples = T * 3
    times = np.sort(rng.uniform(0, T, n_samples))
    values = rng.uniform(0, 100, n_samples)
    return (cpu, mem, cpu_lim, mem_lim, group), (times, values)


def bench(name, fn, args, repeat):
    fn(*args)  # compile / warm caches
    best = min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))
    return name, best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seconds", type=int, default=3600)
    ap.add_argument("--replicas", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    a = ap.parse_args()
    if not kernels.USE_NUMBA:
        print("numba disabled or missing: only the numpy path is timed")

    (cpu, mem, cl, ml, group), (times, values) = make_inputs(a.seconds, a.replicas)
    cases = [
        ("overprovision_mask", kernels.overprovision_mask_numpy, kernels._overprovision_mask_jit,
         (cpu, mem, cl, ml, group, 0.49, 0.49, True)),
        ("utilization_terms", kernels.utilization_terms_numpy, kernels._utilization_terms_jit,
         (cpu, mem, cl, ml)),
        ("locf_grid", kernels.locf_grid_numpy, kernels._locf_grid_jit,
         (times, values, 0.0, a.seconds, 3.0)),
    ]
    print(f"{a.seconds} s x {a.replicas} replicas, best of {a.repeat}")
    print(f"{'kernel':<20} {'numpy [ms]':>11} {'numba [ms]':>11} {'speedup':>8}")
    for label, np_fn, jit_fn, args in cases:
        _, t_np = bench(label, np_fn, args, a.repeat)
        if kernels.USE_NUMBA:
            ref, got = np_fn(*args), jit_fn(*args)
            for x, y in zip(ref if isinstance(ref, tuple) else (ref,), got if isinstance(got, tuple) else (got,)):
                np.testing.assert_array_equal(x, y)
            _, t_jit = bench(label, jit_fn, args, a.repeat)
            print(f"{label:<20} {t_np * 1e3:>11.2f} {t_jit * 1e3:>11.2f} {t_np / t_jit:>7.1f}x")
        else:
            print(f"{label:<20} {t_np * 1e3:>11.2f} {'-':>11} {'-':>8}")


if __name__ == "__main__":
    main()
