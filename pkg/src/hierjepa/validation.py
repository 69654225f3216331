"""Input validation helpers shared by the estimators and the CLI."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import LengthError, Trajectory
from .hexgrid import HexGridSpec


def check_trajectories(X, min_len: int = 2, max_len: int | None = None) -> list[Trajectory]:
    """Coerce ``X`` to a list of :class:`Trajectory` and check lengths.

    Raw (n, 2) lon/lat arrays are accepted and given positional ids.
    """
    if isinstance(X, Trajectory):
        raise TypeError("expected a sequence of trajectories, got a single Trajectory")
    out = []
    for i, t in enumerate(X):
        if not isinstance(t, Trajectory):
            arr = np.asarray(t, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != 2:
                raise ValueError(f"item {i}: expected an (n, 2) lon/lat array, got shape {arr.shape}")
            t = Trajectory(str(i), arr)
        if not np.isfinite(t.points).all():
            raise ValueError(f"trajectory {t.id}: non-finite coordinates")
        if len(t) < min_len:
            raise LengthError(f"trajectory {t.id}: {len(t)} points < {min_len}")
        if max_len is not None and len(t) > max_len:
            raise LengthError(f"trajectory {t.id}: {len(t)} points > {max_len}")
        out.append(t)
    if not out:
        raise ValueError("no trajectories given")
    return out


def grid_spec_for(trajs: Sequence[Trajectory], edge_len_m: float, margin: float = 0.05) -> HexGridSpec:
    """Grid centred on the data's bounding box, padded by ``margin`` of its extent."""
    pts = np.vstack([t.points for t in trajs])
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    span = np.maximum(hi - lo, 1e-6)
    lo = lo - margin * span
    hi = hi + margin * span
    mid = (lo + hi) / 2
    return HexGridSpec(float(mid[0]), float(mid[1]), edge_len_m, float(lo[0]), float(lo[1]),
                       float(hi[0]), float(hi[1]))
