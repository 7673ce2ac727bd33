"""Per-second numeric kernels.

Each kernel has a numba implementation and a numpy implementation with the
same signature and bit-identical results; ``_jit.USE_NUMBA`` picks one at
import time. Both are importable directly for tests and benchmarks.
"""

import numpy as np

from ._jit import USE_NUMBA, njit

__all__ = [
    "locf_grid",
    "overprovision_mask",
    "utilization_terms",
    "locf_grid_numpy",
    "overprovision_mask_numpy",
    "utilization_terms_numpy",
    "USE_NUMBA",
]


# --- last-observation-carried-forward onto a 1 s grid -----------------------


def locf_grid_numpy(times, values, t0, n, max_gap):
    grid = t0 + np.arange(n, dtype=np.float64)
    out = np.full(n, np.nan)
    if times.size == 0 or n == 0:
        return out
    idx = np.searchsorted(times, grid + 1.0, side="left") - 1
    ok = idx >= 0
    safe = np.where(ok, idx, 0)
    ok &= (grid - times[safe]) < max_gap
    out[ok] = values[safe[ok]]
    return out


@njit(cache=True)
def _locf_grid_jit(times, values, t0, n, max_gap):
    out = np.full(n, np.nan)
    m = times.shape[0]
    j = -1
    for s in range(n):
        g = t0 + s
        while j + 1 < m and times[j + 1] < g + 1.0:
            j += 1
        if j >= 0 and (g - times[j]) < max_gap:
            out[s] = values[j]
    return out


def locf_grid(times, values, t0, n, max_gap):
    """Value per grid second ``t0 + s`` from the last sample strictly before
    ``t0 + s + 1``, if that sample is younger than ``max_gap`` seconds; NaN
    otherwise. ``times`` must be sorted ascending."""
    times = np.ascontiguousarray(times, dtype=np.float64)
    values = np.ascontiguousarray(values, dtype=np.float64)
    if USE_NUMBA:
        return _locf_grid_jit(times, values, float(t0), int(n), float(max_gap))
    return locf_grid_numpy(times, values, float(t0), int(n), float(max_gap))


# --- over-provisioned replica seconds ---------------------------------------


def overprovision_mask_numpy(cpu, mem, cpu_lim, mem_lim, group, cpu_thr, mem_thr, require_peer):
    T, R = cpu.shape
    valid = ~(np.isnan(cpu) | np.isnan(mem))
    with np.errstate(invalid="ignore"):
        low = valid & (cpu / cpu_lim < cpu_thr) & (mem / mem_lim < mem_thr)
    if not require_peer:
        return low
    out = np.zeros((T, R), dtype=np.bool_)
    for g in np.unique(group):
        cols = np.flatnonzero(group == g)
        k = cols.size
        if k < 2:
            continue
        c = cpu[:, cols]
        m = mem[:, cols]
        head_c = cpu_lim[cols][None, :] - c
        head_m = mem_lim[cols][None, :] - m
        # [T, candidate, peer]
        with np.errstate(invalid="ignore"):
            fits = (head_c[:, None, :] >= c[:, :, None]) & (head_m[:, None, :] >= m[:, :, None])
        fits &= valid[:, cols][:, None, :]
        fits &= ~np.eye(k, dtype=np.bool_)[None, :, :]
        out[:, cols] = low[:, cols] & fits.any(axis=2)
    return out


@njit(cache=True)
def _overprovision_mask_jit(cpu, mem, cpu_lim, mem_lim, group, cpu_thr, mem_thr, require_peer):
    T, R = cpu.shape
    out = np.zeros((T, R), dtype=np.bool_)
    for t in range(T):
        for r in range(R):
            c = cpu[t, r]
            m = mem[t, r]
            if np.isnan(c) or np.isnan(m):
                continue
            if not (c / cpu_lim[r] < cpu_thr and m / mem_lim[r] < mem_thr):
                continue
            if not require_peer:
                out[t, r] = True
                continue
            for p in range(R):
                if p == r or group[p] != group[r]:
                    continue
                pc = cpu[t, p]
                pm = mem[t, p]
                if np.isnan(pc) or np.isnan(pm):
                    continue
                if cpu_lim[p] - pc >= c and mem_lim[p] - pm >= m:
                    out[t, r] = True
                    break
    return out


def overprovision_mask(cpu, mem, cpu_lim, mem_lim, group, cpu_thr, mem_thr, require_peer):
    """Boolean [seconds, replicas] mask of over-provisioned replica seconds.

    A live replica second (cpu and mem both present) qualifies when both
    utilization fractions are below their thresholds and, if
    ``require_peer``, another live replica in the same ``group`` has spare
    cpu and mem at least equal to the candidate's current usage.
    """
    args = (
        np.ascontiguousarray(cpu, dtype=np.float64),
        np.ascontiguousarray(mem, dtype=np.float64),
        np.ascontiguousarray(cpu_lim, dtype=np.float64),
        np.ascontiguousarray(mem_lim, dtype=np.float64),
        np.ascontiguousarray(group, dtype=np.int64),
        float(cpu_thr),
        float(mem_thr),
        bool(require_peer),
    )
    if USE_NUMBA:
        return _overprovision_mask_jit(*args)
    return overprovision_mask_numpy(*args)


# --- used vs provisioned per second -----------------------------------------


def utilization_terms_numpy(cpu, mem, cpu_lim, mem_lim):
    T, R = cpu.shape
    used_c = np.zeros(T)
    prov_c = np.zeros(T)
    used_m = np.zeros(T)
    prov_m = np.zeros(T)
    # column by column, so the additions happen in the same order as the jit loop
    for r in range(R):
        vc = ~np.isnan(cpu[:, r])
        vm = ~np.isnan(mem[:, r])
        used_c += np.where(vc, cpu[:, r], 0.0)
        prov_c += np.where(vc, cpu_lim[r], 0.0)
        used_m += np.where(vm, mem[:, r], 0.0)
        prov_m += np.where(vm, mem_lim[r], 0.0)
    return used_c, prov_c, used_m, prov_m


@njit(cache=True)
def _utilization_terms_jit(cpu, mem, cpu_lim, mem_lim):
    T, R = cpu.shape
    used_c = np.zeros(T)
    prov_c = np.zeros(T)
    used_m = np.zeros(T)
    prov_m = np.zeros(T)
    for t in range(T):
        for r in range(R):
            if not np.isnan(cpu[t, r]):
                used_c[t] += cpu[t, r]
                prov_c[t] += cpu_lim[r]
            if not np.isnan(mem[t, r]):
                used_m[t] += mem[t, r]
                prov_m[t] += mem_lim[r]
    return used_c, prov_c, used_m, prov_m


def utilization_terms(cpu, mem, cpu_lim, mem_lim):
    """Per-second (used cpu, provisioned cpu, used mem, provisioned mem) over
    the replicas that have a reading in that second."""
    args = (
        np.ascontiguousarray(cpu, dtype=np.float64),
        np.ascontiguousarray(mem, dtype=np.float64),
        np.ascontiguousarray(cpu_lim, dtype=np.float64),
        np.ascontiguousarray(mem_lim, dtype=np.float64),
    )
    if USE_NUMBA:
        return _utilization_terms_jit(*args)
    return utilization_terms_numpy(*args)
