"""Trajectory containers, CSV ingestion, synthetic generation, augmentation and batching."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .hexgrid import HexGridSpec
from .region_embed import EmbeddingTable

logger = logging.getLogger(__name__)


class DataError(ValueError):
    """Input data is malformed or empty after filtering."""


class LengthError(ValueError):
    pass


@dataclass
class Trajectory:
    id: str
    points: np.ndarray  # (n, 2) lon, lat in degrees
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.timestamps is not None:
            self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
            if len(self.timestamps) != len(self.points):
                raise DataError(f"trajectory {self.id}: timestamps and points differ in length")
            if np.any(np.diff(self.timestamps) < 0):
                raise DataError(f"trajectory {self.id}: timestamps decrease")

    def __len__(self) -> int:
        return len(self.points)

    def with_points(self, points: np.ndarray, keep: np.ndarray | None = None) -> "Trajectory":
        ts = None
        if self.timestamps is not None:
            ts = self.timestamps if keep is None else self.timestamps[keep]
        return Trajectory(self.id, points, ts)


@dataclass(frozen=True)
class SynthRegion:
    """Rectangular study area in metres around a centre, plus walk dynamics."""

    center_lon: float = -8.61
    center_lat: float = 41.15
    width_m: float = 8000.0
    height_m: float = 8000.0
    min_len: int = 20
    max_len: int = 200
    max_step_m: float = 120.0
    min_step_m: float = 40.0
    heading_noise: float = 0.15
    turn_prob: float = 0.08

    def grid_spec(self, edge_len_m: float) -> HexGridSpec:
        probe = HexGridSpec(self.center_lon, self.center_lat, edge_len_m)
        lon0, lat0 = probe.unproject(-self.width_m / 2, -self.height_m / 2)
        lon1, lat1 = probe.unproject(self.width_m / 2, self.height_m / 2)
        return HexGridSpec(self.center_lon, self.center_lat, edge_len_m,
                           float(lon0), float(lat0), float(lon1), float(lat1))


def _check_len(n: int, min_len: int, max_len: int) -> bool:
    return min_len <= n <= max_len


def load_csv(path, spec: HexGridSpec, min_len: int = 20, max_len: int = 200) -> list[Trajectory]:
    """Read ``traj_id, seq, lon, lat[, t]`` rows into trajectories.

    Points outside the grid bounding box are dropped; trajectories whose
    remaining length falls outside ``[min_len, max_len]`` are filtered.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    groups: dict[str, list[tuple[float, float, float, float | None]]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        cols = [h.strip() for h in header]
        need = ["traj_id", "seq", "lon", "lat"]
        if any(c not in cols for c in need):
            raise DataError(f"{path}: header must contain {need}, got {cols}")
        ix = {c: cols.index(c) for c in need}
        it = cols.index("t") if "t" in cols else None
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                tid = row[ix["traj_id"]].strip()
                seq = float(row[ix["seq"]])
                lon = float(row[ix["lon"]])
                lat = float(row[ix["lat"]])
                t = float(row[it]) if it is not None and row[it].strip() else None
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: malformed row {row!r}") from exc
            groups.setdefault(tid, []).append((seq, lon, lat, t))

    out: list[Trajectory] = []
    dropped_pts = 0
    filtered = 0
    for tid, rows in groups.items():
        rows.sort(key=lambda r: r[0])
        arr = np.array([(r[1], r[2]) for r in rows], dtype=np.float64)
        ok = spec.in_bounds(arr[:, 0], arr[:, 1])
        dropped_pts += int((~ok).sum())
        ts = None
        if it is not None and all(r[3] is not None for r in rows):
            ts = np.array([r[3] for r in rows])[ok]
        arr = arr[ok]
        if not _check_len(len(arr), min_len, max_len):
            filtered += 1
            continue
        out.append(Trajectory(tid, arr, ts))
    if dropped_pts:
        logger.warning("%s: dropped %d out-of-bounds points", path, dropped_pts)
    if filtered:
        logger.warning("%s: filtered %d trajectories outside length range [%d, %d]",
                       path, filtered, min_len, max_len)
    if not out:
        raise DataError(f"{path}: no trajectories left after filtering")
    return out


def write_csv(trajs: Sequence[Trajectory], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["traj_id", "seq", "lon", "lat"])
        for t in trajs:
            for i, (lon, lat) in enumerate(t.points):
                w.writerow([t.id, i, repr(float(lon)), repr(float(lat))])


def synth_generate(n_traj: int, region: SynthRegion, seed: int) -> list[Trajectory]:
    """Correlated random walks (heading persistence plus occasional sharp turns)."""
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    rng = np.random.default_rng(seed)
    probe = HexGridSpec(region.center_lon, region.center_lat, 1.0)
    hx, hy = region.width_m / 2, region.height_m / 2
    out = []
    for k in range(n_traj):
        n = int(rng.integers(region.min_len, region.max_len + 1))
        xy = np.empty((n, 2))
        xy[0] = rng.uniform(-hx, hx), rng.uniform(-hy, hy)
        heading = rng.uniform(0, 2 * np.pi)
        for i in range(1, n):
            heading += rng.normal(0.0, region.heading_noise)
            if rng.random() < region.turn_prob:
                heading += rng.choice([-1.0, 1.0]) * (np.pi / 2 + rng.normal(0.0, 0.2))
            step = rng.uniform(region.min_step_m, region.max_step_m)
            nxt = xy[i - 1] + step * np.array([np.cos(heading), np.sin(heading)])
            if abs(nxt[0]) > hx:
                heading = np.pi - heading
            if abs(nxt[1]) > hy:
                heading = -heading
            xy[i] = np.clip(nxt, [-hx, -hy], [hx, hy])
        lon, lat = probe.unproject(xy[:, 0], xy[:, 1])
        out.append(Trajectory(f"s{k}", np.stack([lon, lat], axis=1)))
    return out


def downsample(t: Trajectory, rho_s: float, seed) -> Trajectory:
    """Drop each interior point independently with probability ``rho_s``."""
    if not 0.0 <= rho_s <= 0.9:
        raise ValueError(f"rho_s must lie in [0, 0.9], got {rho_s}")
    if rho_s == 0 or len(t) <= 2:
        return t
    rng = np.random.default_rng(seed)
    keep = rng.random(len(t)) >= rho_s
    keep[0] = keep[-1] = True
    return t.with_points(t.points[keep], keep)


def distort(t: Trajectory, rho_d: float, seed, spec: HexGridSpec, std_m: float) -> Trajectory:
    """Shift each point with probability ``rho_d`` by isotropic Gaussian noise (metres)."""
    if not 0.0 <= rho_d <= 0.9:
        raise ValueError(f"rho_d must lie in [0, 0.9], got {rho_d}")
    if rho_d == 0:
        return t
    rng = np.random.default_rng(seed)
    pick = rng.random(len(t)) < rho_d
    noise = rng.normal(0.0, std_m, size=(len(t), 2))
    x, y = spec.project(t.points[:, 0], t.points[:, 1])
    x = np.where(pick, x + noise[:, 0], x)
    y = np.where(pick, y + noise[:, 1], y)
    lon, lat = spec.unproject(x, y)
    # stay inside the grid so every shifted point is still assignable
    lon = np.clip(lon, spec.min_lon, spec.max_lon)
    lat = np.clip(lat, spec.min_lat, spec.max_lat)
    return t.with_points(np.stack([lon, lat], axis=1))


def odd_even_split(q: Trajectory) -> tuple[Trajectory, Trajectory]:
    """Points at 1-based odd positions and at even positions."""
    if len(q) < 4:
        raise LengthError(f"odd_even_split needs >= 4 points, got {len(q)}")
    ts = q.timestamps
    a = Trajectory(q.id + "/a", q.points[0::2], None if ts is None else ts[0::2])
    b = Trajectory(q.id + "/b", q.points[1::2], None if ts is None else ts[1::2])
    return a, b


@dataclass
class Batch:
    embeddings: np.ndarray  # (B, n_max, d)
    pad_mask: np.ndarray  # (B, n_max), True on real tokens
    lengths: np.ndarray  # (B,)
    rows: np.ndarray | None = field(default=None, repr=False)

    def unbatch(self) -> list[np.ndarray]:
        return [self.embeddings[i, :n] for i, n in enumerate(self.lengths)]


def cell_rows(trajs: Sequence[Trajectory], table: EmbeddingTable, spec: HexGridSpec) -> list[np.ndarray]:
    """Per-trajectory table row indices (cache these; batching is then a gather)."""
    return [table.rows_for_points(t.points, spec) for t in trajs]


def batch_from_rows(rows: Sequence[np.ndarray], table: EmbeddingTable) -> Batch:
    lengths = np.array([len(r) for r in rows], dtype=np.int64)
    n_max = int(lengths.max())
    idx = np.full((len(rows), n_max), table.pad_index, dtype=np.int64)
    for i, r in enumerate(rows):
        idx[i, : len(r)] = r
    pad_mask = np.arange(n_max)[None, :] < lengths[:, None]
    return Batch(table.padded_vectors[idx], pad_mask, lengths, idx)


def embed_batch(trajs: Sequence[Trajectory], table: EmbeddingTable, spec: HexGridSpec) -> Batch:
    """Look up every point's cell vector and pad to the batch's longest trajectory."""
    return batch_from_rows(cell_rows(trajs, table, spec), table)
