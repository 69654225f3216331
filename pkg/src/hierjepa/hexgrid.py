"""Planar pointy-top hexagonal tessellation over a local equirectangular projection.

Cells are addressed by axial coordinates ``(q, r)``. Cell centres sit at
``x = edge * sqrt(3) * (q + r / 2)``, ``y = edge * 1.5 * r`` in metres east and
north of the origin, so all six neighbour centres are ``sqrt(3) * edge`` away.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

EARTH_RADIUS_M = 6_371_008.8
SQRT3 = np.sqrt(3.0)

# axial unit directions, in the order neighbours are reported
HEX_DIRECTIONS: tuple[tuple[int, int], ...] = ((1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1))


class OutOfRegionError(ValueError):
    """A point lies outside the grid's bounding box."""


class EmptyGraphError(ValueError):
    """No in-bounds points were available to build a region graph."""


HexCellId = tuple[int, int]


@dataclass(frozen=True)
class HexGridSpec:
    """Grid geometry: origin, cell edge length and the study bounding box (degrees)."""

    origin_lon: float
    origin_lat: float
    edge_len_m: float
    min_lon: float = -180.0
    min_lat: float = -85.0
    max_lon: float = 180.0
    max_lat: float = 85.0

    def __post_init__(self):
        if not self.edge_len_m > 0:
            raise ValueError(f"edge_len_m must be > 0, got {self.edge_len_m}")
        if not (self.min_lon < self.max_lon and self.min_lat < self.max_lat):
            raise ValueError("bounding box is empty")
        if abs(self.origin_lat) >= 89.0:
            raise ValueError("projection degenerates near the poles")

    @property
    def _kx(self) -> float:
        return EARTH_RADIUS_M * np.pi / 180.0 * np.cos(np.radians(self.origin_lat))

    @property
    def _ky(self) -> float:
        return EARTH_RADIUS_M * np.pi / 180.0

    def project(self, lon, lat) -> tuple[np.ndarray, np.ndarray]:
        """Degrees to metres east/north of the origin."""
        lon = np.asarray(lon, dtype=np.float64)
        lat = np.asarray(lat, dtype=np.float64)
        return (lon - self.origin_lon) * self._kx, (lat - self.origin_lat) * self._ky

    def unproject(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        return x / self._kx + self.origin_lon, y / self._ky + self.origin_lat

    def in_bounds(self, lon, lat) -> np.ndarray:
        lon = np.asarray(lon, dtype=np.float64)
        lat = np.asarray(lat, dtype=np.float64)
        return (lon >= self.min_lon) & (lon <= self.max_lon) & (lat >= self.min_lat) & (lat <= self.max_lat)

    def to_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in self.__dataclass_fields__}


def center_xy(q, r, edge: float) -> tuple[np.ndarray, np.ndarray]:
    q = np.asarray(q, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    return edge * SQRT3 * (q + r / 2.0), edge * 1.5 * r


def center(cell: HexCellId, spec: HexGridSpec) -> tuple[float, float]:
    """Cell centre as (lon, lat)."""
    x, y = center_xy(cell[0], cell[1], spec.edge_len_m)
    lon, lat = spec.unproject(x, y)
    return float(lon), float(lat)


def _cube_round(fq: np.ndarray, fr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    fs = -fq - fr
    q = np.round(fq)
    r = np.round(fr)
    s = np.round(fs)
    dq = np.abs(q - fq)
    dr = np.abs(r - fr)
    ds = np.abs(s - fs)
    fix_q = (dq > dr) & (dq > ds)
    fix_r = ~fix_q & (dr > ds)
    q = np.where(fix_q, -r - s, q)
    r = np.where(fix_r, -q - s, r)
    return q.astype(np.int64), r.astype(np.int64)


def assign_xy(x, y, edge: float) -> tuple[np.ndarray, np.ndarray]:
    """Nearest cell centre for projected points, ties to the smaller (q, r)."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    fq = (SQRT3 / 3.0 * x - y / 3.0) / edge
    fr = (2.0 / 3.0 * y) / edge
    q0, r0 = _cube_round(fq, fr)
    # cube rounding is exact away from edges; re-check the 7 candidates so
    # boundary points follow the documented tie-break
    offs = np.array(((0, 0),) + HEX_DIRECTIONS)
    cq = q0[:, None] + offs[None, :, 0]
    cr = r0[:, None] + offs[None, :, 1]
    cx, cy = center_xy(cq, cr, edge)
    d2 = (cx - x[:, None]) ** 2 + (cy - y[:, None]) ** 2
    best = d2.min(axis=1, keepdims=True)
    tied = d2 <= best
    big = np.iinfo(np.int64).max
    bq = np.where(tied, cq, big).min(axis=1)
    br = np.where(tied & (cq == bq[:, None]), cr, big).min(axis=1)
    return bq, br


def assign(point: Sequence[float], spec: HexGridSpec) -> HexCellId:
    """Cell index of a single (lon, lat) point."""
    lon, lat = float(point[0]), float(point[1])
    if not spec.in_bounds(lon, lat):
        raise OutOfRegionError(f"point ({lon}, {lat}) is outside the grid bounding box")
    x, y = spec.project(lon, lat)
    q, r = assign_xy(x, y, spec.edge_len_m)
    return int(q[0]), int(r[0])


def assign_many(lon, lat, spec: HexGridSpec) -> np.ndarray:
    """Vectorised :func:`assign`; returns an (N, 2) int array. Raises on any out-of-bounds point."""
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    ok = spec.in_bounds(lon, lat)
    if not ok.all():
        raise OutOfRegionError(f"{int((~ok).sum())} point(s) outside the grid bounding box")
    x, y = spec.project(lon, lat)
    q, r = assign_xy(x, y, spec.edge_len_m)
    return np.stack([q, r], axis=1)


def neighbors(cell: HexCellId) -> list[HexCellId]:
    q, r = cell
    return [(q + dq, r + dr) for dq, dr in HEX_DIRECTIONS]


def hex_distance(a: HexCellId, b: HexCellId) -> int:
    dq = a[0] - b[0]
    dr = a[1] - b[1]
    return (abs(dq) + abs(dr) + abs(dq + dr)) // 2


@dataclass
class RegionGraph:
    """Undirected 6-neighbour adjacency over occupied cells.

    ``nodes`` is sorted, so node indices are stable for a given set of cells.
    """

    nodes: list[HexCellId]
    edges: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.index = {c: i for i, c in enumerate(self.nodes)}
        self.adjacency: list[list[int]] = [[] for _ in self.nodes]
        for i, j in self.edges:
            self.adjacency[i].append(j)
            self.adjacency[j].append(i)
        for adj in self.adjacency:
            adj.sort()

    @classmethod
    def from_cells(cls, cells: Iterable[HexCellId]) -> "RegionGraph":
        nodes = sorted({(int(q), int(r)) for q, r in cells})
        if not nodes:
            raise EmptyGraphError("no occupied cells")
        index = {c: i for i, c in enumerate(nodes)}
        edges = []
        for i, c in enumerate(nodes):
            for nb in neighbors(c):
                j = index.get(nb)
                if j is not None and i < j:
                    edges.append((i, j))
        return cls(nodes, sorted(edges))

    def __len__(self) -> int:
        return len(self.nodes)


def build_region_graph(trajectories, spec: HexGridSpec) -> RegionGraph:
    """Graph over every cell touched by an in-bounds trajectory point.

    ``trajectories`` yields objects with a ``points`` (n, 2) lon/lat array, or
    raw arrays. Out-of-bounds points are skipped.
    """
    cells: set[HexCellId] = set()
    dropped = 0
    for t in trajectories:
        pts = np.asarray(getattr(t, "points", t), dtype=np.float64).reshape(-1, 2)
        ok = spec.in_bounds(pts[:, 0], pts[:, 1])
        dropped += int((~ok).sum())
        if ok.any():
            x, y = spec.project(pts[ok, 0], pts[ok, 1])
            q, r = assign_xy(x, y, spec.edge_len_m)
            cells.update(zip(q.tolist(), r.tolist()))
    if dropped:
        logger.info("build_region_graph: skipped %d out-of-bounds points", dropped)
    if not cells:
        raise EmptyGraphError("no in-bounds trajectory points")
    return RegionGraph.from_cells(cells)
