"""Independent reference implementations used as test oracles."""

import math

import numpy as np


def naive_rd(adc, wr, wd):
    """Range then Doppler DFT by explicit sums, Doppler bins re-indexed so bin M//2 is zero."""
    n, m, _ = adc.shape
    x = adc * wr[:, None, None]
    rng_out = np.zeros_like(x, dtype=complex)
    for k in range(n):
        for j in range(n):
            rng_out[k] += x[j] * np.exp(-2j * math.pi * j * k / n)
    y = rng_out * wd[None, :, None]
    out = np.zeros_like(y)
    for kb in range(m):
        f = (kb - m // 2) % m
        for j in range(m):
            out[:, kb] += y[:, j] * np.exp(-2j * math.pi * j * f / m)
    return out


def naive_cfar(plane, guard, train, scale):
    (gr, gd), (tr, td) = guard, train
    n_r, n_d = plane.shape
    hits = []
    for r in range(n_r):
        for d in range(n_d):
            total, count = 0.0, 0
            for i in range(r - gr - tr, r + gr + tr + 1):
                for j in range(d - gd - td, d + gd + td + 1):
                    if not (0 <= i < n_r and 0 <= j < n_d):
                        continue
                    if abs(i - r) <= gr and abs(j - d) <= gd:
                        continue
                    total += plane[i, j]
                    count += 1
            if plane[r, d] <= scale * total / count:
                continue
            peak = True
            for i in range(r - 1, r + 2):
                for j in range(d - 1, d + 2):
                    if 0 <= i < n_r and 0 <= j < n_d and plane[i, j] > plane[r, d]:
                        peak = False
            if peak:
                hits.append((r, d))
    return hits


def brute_match_counts(dets, gts, tol_r, tol_a):
    """Independent greedy matcher: repeatedly take the best remaining admissible pair."""
    free_d, free_g = set(range(len(dets))), set(range(len(gts)))
    pairs = []
    while True:
        best = None
        for i in free_d:
            for j in free_g:
                er = abs(dets[i]["range_m"] - gts[j]["range_m"])
                ea = abs(dets[i]["azimuth_rad"] - gts[j]["azimuth_rad"])
                if er > tol_r or ea > tol_a:
                    continue
                key = (er, ea, i, j)
                if best is None or key < best:
                    best = key
        if best is None:
            return pairs
        pairs.append(best)
        free_d.discard(best[2])
        free_g.discard(best[3])
