"""Heuristic trajectory distances on projected planar coordinates (metres).

All four measures take (n, 2) arrays. EDR and LCSS use a matching threshold
``eps_m``; the DPs keep two rolling rows.
"""

from __future__ import annotations

import csv
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit

KINDS = ("edr", "lcss", "hausdorff", "frechet")
MATRIX_MAGIC = b"TSIM"
MATRIX_VERSION = 1


@dataclass(frozen=True)
class MeasureConfig:
    kind: str
    eps_m: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown measure {self.kind!r}; expected one of {KINDS}")
        if self.kind in ("edr", "lcss") and not (self.eps_m is not None and self.eps_m > 0):
            raise ValueError(f"{self.kind} needs eps_m > 0")


def _check(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("trajectories must be non-empty")
    return a, b


@njit(cache=True, nogil=True)
def _edr(a, b, eps):
    n, m = a.shape[0], b.shape[0]
    prev = np.arange(m + 1).astype(np.float64)
    cur = np.empty(m + 1)
    for i in range(1, n + 1):
        cur[0] = i
        for j in range(1, m + 1):
            d = math.hypot(a[i - 1, 0] - b[j - 1, 0], a[i - 1, 1] - b[j - 1, 1])
            sub = 0.0 if d <= eps else 1.0
            v = prev[j - 1] + sub
            if prev[j] + 1.0 < v:
                v = prev[j] + 1.0
            if cur[j - 1] + 1.0 < v:
                v = cur[j - 1] + 1.0
            cur[j] = v
        prev, cur = cur, prev
    return prev[m]


@njit(cache=True, nogil=True)
def _lcss(a, b, eps):
    n, m = a.shape[0], b.shape[0]
    prev = np.zeros(m + 1)
    cur = np.zeros(m + 1)
    for i in range(1, n + 1):
        cur[0] = 0.0
        for j in range(1, m + 1):
            if math.hypot(a[i - 1, 0] - b[j - 1, 0], a[i - 1, 1] - b[j - 1, 1]) <= eps:
                cur[j] = prev[j - 1] + 1.0
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev, cur = cur, prev
    return prev[m]


@njit(cache=True, nogil=True)
def _frechet(a, b):
    n, m = a.shape[0], b.shape[0]
    prev = np.empty(m)
    cur = np.empty(m)
    for i in range(n):
        for j in range(m):
            d = math.hypot(a[i, 0] - b[j, 0], a[i, 1] - b[j, 1])
            if i == 0 and j == 0:
                best = d
            elif i == 0:
                best = cur[j - 1]
            elif j == 0:
                best = prev[0]
            else:
                best = min(prev[j], cur[j - 1], prev[j - 1])
            cur[j] = max(d, best)
        prev, cur = cur, prev
    return prev[m - 1]


@njit(cache=True, nogil=True)
def _hausdorff(a, b):
    n, m = a.shape[0], b.shape[0]
    h_ab = 0.0
    col_min = np.full(m, np.inf)
    for i in range(n):
        row_min = np.inf
        for j in range(m):
            d = math.hypot(a[i, 0] - b[j, 0], a[i, 1] - b[j, 1])
            if d < row_min:
                row_min = d
            if d < col_min[j]:
                col_min[j] = d
        if row_min > h_ab:
            h_ab = row_min
    h_ba = 0.0
    for j in range(m):
        if col_min[j] > h_ba:
            h_ba = col_min[j]
    return max(h_ab, h_ba)


def edr(a, b, eps_m: float) -> int:
    """Edit distance on real sequences: unit insert/delete, free match within ``eps_m``."""
    a, b = _check(a, b)
    return int(_edr(a, b, float(eps_m)))


def lcss_length(a, b, eps_m: float) -> int:
    a, b = _check(a, b)
    return int(_lcss(a, b, float(eps_m)))


def lcss_dist(a, b, eps_m: float) -> float:
    """``1 - LCSS / min(len)``, in [0, 1]."""
    a, b = _check(a, b)
    return 1.0 - _lcss(a, b, float(eps_m)) / min(len(a), len(b))


def hausdorff(a, b) -> float:
    a, b = _check(a, b)
    return float(_hausdorff(a, b))


def discrete_frechet(a, b) -> float:
    a, b = _check(a, b)
    return float(_frechet(a, b))


def measure(a, b, cfg: MeasureConfig) -> float:
    if cfg.kind == "edr":
        return float(edr(a, b, cfg.eps_m))
    if cfg.kind == "lcss":
        return lcss_dist(a, b, cfg.eps_m)
    if cfg.kind == "hausdorff":
        return hausdorff(a, b)
    return discrete_frechet(a, b)


def _row(i: int, trajs: Sequence[np.ndarray], cfg: MeasureConfig) -> np.ndarray:
    out = np.zeros(len(trajs))
    for j in range(i + 1, len(trajs)):
        out[j] = measure(trajs[i], trajs[j], cfg)
    return out


def pairwise_matrix(trajs: Sequence[np.ndarray], cfg: MeasureConfig,
                    workers: int = 1) -> np.ndarray:
    """Symmetric all-pairs distance matrix with a zero diagonal.

    Rows are computed independently, so any ``workers`` count gives the same matrix.
    """
    if len(trajs) < 2:
        raise ValueError("need at least 2 trajectories")
    trajs = [np.ascontiguousarray(t, dtype=np.float64).reshape(-1, 2) for t in trajs]
    n = len(trajs)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(lambda i: _row(i, trajs, cfg), range(n)))
    else:
        rows = [_row(i, trajs, cfg) for i in range(n)]
    upper = np.vstack(rows)
    return upper + upper.T


def neighbor_lists(mat: np.ndarray, k: int | None = None) -> np.ndarray:
    """Per row, other indices by ascending distance (index breaks ties); self excluded."""
    n = mat.shape[0]
    k = n - 1 if k is None else min(k, n - 1)
    out = np.empty((n, k), dtype=np.int64)
    idx = np.arange(n)
    for i in range(n):
        order = np.lexsort((idx, mat[i]))
        order = order[order != i]
        out[i] = order[:k]
    return out


def save_matrix(mat: np.ndarray, path, kind: str) -> None:
    n = mat.shape[0]
    iu = np.triu_indices(n, k=1)
    code = KINDS.index(kind)
    head = MATRIX_MAGIC + struct.pack("<III", MATRIX_VERSION, n, code)
    Path(path).write_bytes(head + mat[iu].astype("<f8").tobytes())


def load_matrix(path) -> tuple[np.ndarray, str]:
    blob = Path(path).read_bytes()
    if blob[:4] != MATRIX_MAGIC:
        raise ValueError("not a distance matrix file")
    version, n, code = struct.unpack_from("<III", blob, 4)
    if version != MATRIX_VERSION:
        raise ValueError(f"unsupported matrix version {version}")
    vals = np.frombuffer(blob, dtype="<f8", offset=16)
    mat = np.zeros((n, n))
    mat[np.triu_indices(n, k=1)] = vals
    return mat + mat.T, KINDS[code]


def save_neighbors_csv(neigh: np.ndarray, mat: np.ndarray, path, ids: Sequence[str] | None = None) -> None:
    ids = list(ids) if ids is not None else [str(i) for i in range(mat.shape[0])]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query", "rank", "neighbor", "distance"])
        for i, row in enumerate(neigh):
            for r, j in enumerate(row, start=1):
                w.writerow([ids[i], r, ids[j], repr(float(mat[i, j]))])
