"""Loop-heavy numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``ARFT_DISABLE_NUMBA`` is unset (or set to ``0``/``false``).
Both paths return identical results up to floating-point summation order;
``tests/test_kernels.py`` checks them against each other.
"""

import os

import numpy as np

try:
    from numba import njit

    _NUMBA_IMPORTED = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _NUMBA_IMPORTED = False


def _env_disabled():
    return os.environ.get("ARFT_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")


USE_NUMBA = _NUMBA_IMPORTED and not _env_disabled()


def backend():
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# pairwise Euclidean distances
# ---------------------------------------------------------------------------

def pairwise_distances_numpy(z):
    diff = z[:, None, :] - z[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


if _NUMBA_IMPORTED:

    @njit(cache=True)
    def pairwise_distances_numba(z):
        n, d = z.shape
        out = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                acc = 0.0
                for k in range(d):
                    t = z[i, k] - z[j, k]
                    acc += t * t
                out[i, j] = np.sqrt(acc)
                out[j, i] = out[i, j]
        return out


def pairwise_distances(z):
    z = np.ascontiguousarray(z, dtype=np.float64)
    if USE_NUMBA:
        return pairwise_distances_numba(z)
    return pairwise_distances_numpy(z)


# ---------------------------------------------------------------------------
# midranks (1-based, ties share the average rank)
# ---------------------------------------------------------------------------

def midranks_numpy(x):
    n = x.shape[0]
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    # start index of each run of equal values
    new_run = np.empty(n, dtype=bool)
    new_run[0] = True
    np.not_equal(xs[1:], xs[:-1], out=new_run[1:])
    starts = np.flatnonzero(new_run)
    ends = np.append(starts[1:], n)
    avg = (starts + ends + 1) / 2.0
    run_id = np.cumsum(new_run) - 1
    ranks = np.empty(n)
    ranks[order] = avg[run_id]
    return ranks


if _NUMBA_IMPORTED:

    @njit(cache=True)
    def midranks_numba(x):
        n = x.shape[0]
        order = np.argsort(x, kind="mergesort")
        ranks = np.empty(n)
        i = 0
        while i < n:
            j = i
            while j + 1 < n and x[order[j + 1]] == x[order[i]]:
                j += 1
            r = (i + j + 2) / 2.0
            for k in range(i, j + 1):
                ranks[order[k]] = r
            i = j + 1
        return ranks


def midranks(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        return np.empty(0)
    if USE_NUMBA:
        return midranks_numba(x)
    return midranks_numpy(x)


# ---------------------------------------------------------------------------
# ReliefF weights
#
# x is range-scaled (every column already divided by its range), so the
# per-feature diff is |x_i - x_j| and the neighbour distance is its sum.
# Neighbour ties are broken by the lower sample index (stable sort).
# ---------------------------------------------------------------------------

def relieff_numpy(x, y, probes, k_hit, k_miss, priors, chunk=256):
    n, p = x.shape
    n_classes = priors.shape[0]
    w = np.zeros(p)
    for start in range(0, probes.shape[0], chunk):
        idx = probes[start:start + chunk]
        dist = np.abs(x[idx][:, None, :] - x[None, :, :]).sum(axis=2)
        for row, i in enumerate(idx):
            order = np.argsort(dist[row], kind="mergesort")
            order = order[order != i]
            ci = y[i]
            ranked_labels = y[order]
            hits = order[ranked_labels == ci][:k_hit[ci]]
            if hits.size:
                w -= np.abs(x[hits] - x[i]).sum(axis=0) / hits.size
            scale = 1.0 - priors[ci]
            for c in range(n_classes):
                if c == ci or k_miss[c] == 0:
                    continue
                misses = order[ranked_labels == c][:k_miss[c]]
                w += (priors[c] / scale) * np.abs(x[misses] - x[i]).sum(axis=0) / misses.size
    return w / probes.shape[0]


if _NUMBA_IMPORTED:

    @njit(cache=True)
    def relieff_numba(x, y, probes, k_hit, k_miss, priors):
        n, p = x.shape
        n_classes = priors.shape[0]
        w = np.zeros(p)
        dist = np.empty(n)
        for t in range(probes.shape[0]):
            i = probes[t]
            for j in range(n):
                acc = 0.0
                for f in range(p):
                    acc += abs(x[i, f] - x[j, f])
                dist[j] = acc
            order = np.argsort(dist, kind="mergesort")
            ci = y[i]
            scale = 1.0 - priors[ci]
            for c in range(n_classes):
                want = k_hit[c] if c == ci else k_miss[c]
                if want == 0:
                    continue
                got = 0
                acc_f = np.zeros(p)
                for oi in range(n):
                    j = order[oi]
                    if j == i or y[j] != c:
                        continue
                    for f in range(p):
                        acc_f[f] += abs(x[j, f] - x[i, f])
                    got += 1
                    if got == want:
                        break
                if got == 0:
                    continue
                if c == ci:
                    for f in range(p):
                        w[f] -= acc_f[f] / got
                else:
                    coef = priors[c] / scale
                    for f in range(p):
                        w[f] += coef * acc_f[f] / got
        return w / probes.shape[0]


def relieff_weights(x, y, probes, k_hit, k_miss, priors):
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.int64)
    probes = np.ascontiguousarray(probes, dtype=np.int64)
    k_hit = np.ascontiguousarray(k_hit, dtype=np.int64)
    k_miss = np.ascontiguousarray(k_miss, dtype=np.int64)
    priors = np.ascontiguousarray(priors, dtype=np.float64)
    if USE_NUMBA:
        return relieff_numba(x, y, probes, k_hit, k_miss, priors)
    return relieff_numpy(x, y, probes, k_hit, k_miss, priors)
