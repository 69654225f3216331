"""Brute-force reference implementations used only by the tests."""

from functools import lru_cache
from itertools import product

import numpy as np


def _d(a, b, i, j):
    return float(np.hypot(a[i][0] - b[j][0], a[i][1] - b[j][1]))


def edr_rec(a, b, eps):
    @lru_cache(maxsize=None)
    def f(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        sub = 0 if _d(a, b, i - 1, j - 1) <= eps else 1
        return min(f(i - 1, j - 1) + sub, f(i - 1, j) + 1, f(i, j - 1) + 1)

    return f(len(a), len(b))


def lcss_rec(a, b, eps):
    @lru_cache(maxsize=None)
    def f(i, j):
        if i == 0 or j == 0:
            return 0
        if _d(a, b, i - 1, j - 1) <= eps:
            return f(i - 1, j - 1) + 1
        return max(f(i - 1, j), f(i, j - 1))

    return f(len(a), len(b))


def frechet_rec(a, b):
    @lru_cache(maxsize=None)
    def c(i, j):
        d = _d(a, b, i, j)
        if i == 0 and j == 0:
            return d
        if i == 0:
            return max(c(0, j - 1), d)
        if j == 0:
            return max(c(i - 1, 0), d)
        return max(min(c(i - 1, j), c(i - 1, j - 1), c(i, j - 1)), d)

    return c(len(a) - 1, len(b) - 1)


def frechet_couplings(a, b):
    """Min over every monotone coupling of the max matched distance (exponential)."""
    n, m = len(a), len(b)
    best = np.inf

    def walk(i, j, worst):
        nonlocal best
        worst = max(worst, _d(a, b, i, j))
        if worst >= best:
            return
        if i == n - 1 and j == m - 1:
            best = worst
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            if i + di < n and j + dj < m:
                walk(i + di, j + dj, worst)

    walk(0, 0, 0.0)
    return best


def hausdorff_brute(a, b):
    d = np.array([[_d(a, b, i, j) for j in range(len(b))] for i in range(len(a))])
    return max(d.min(axis=1).max(), d.min(axis=0).max())


def random_pair(rng, max_len=8, scale=10.0):
    n, m = rng.integers(1, max_len + 1, 2)
    return rng.uniform(0, scale, (n, 2)), rng.uniform(0, scale, (m, 2))
