"""Target-mask and context sampling for one abstraction level."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_RATIOS = (0.10, 0.15, 0.20, 0.25, 0.30)


class MaskTooLargeError(ValueError):
    pass


class DegenerateContextError(ValueError):
    """Every position is covered by a target, so no context remains."""


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def mask_size(r: float, n: int) -> int:
    return max(1, round_half_up(r * n))


@dataclass
class TargetMask:
    indices: np.ndarray  # sorted positions
    ratio: float
    successive: bool


def sample_target_masks(n: int, ratios: Sequence[float], count: int, p_successive: float,
                        rng: np.random.Generator) -> list[TargetMask]:
    """Draw ``count`` masks over positions ``0..n-1``.

    Each mask picks a ratio uniformly from ``ratios``; with probability
    ``p_successive`` it is one contiguous block (no wrap-around), otherwise a
    uniform sample without replacement.
    """
    if n < 2:
        raise ValueError(f"need n >= 2 positions, got {n}")
    if not ratios or any(not 0 < r < 1 for r in ratios):
        raise ValueError(f"ratios must be non-empty and inside (0, 1): {ratios}")
    masks = []
    for _ in range(count):
        r = float(ratios[int(rng.integers(len(ratios)))])
        if round_half_up(r * n) >= n:
            raise MaskTooLargeError(f"ratio {r} masks all {n} positions")
        size = mask_size(r, n)
        successive = bool(rng.random() < p_successive)
        if successive:
            start = int(rng.integers(0, n - size + 1))
            idx = np.arange(start, start + size)
        else:
            idx = np.sort(rng.choice(n, size=size, replace=False))
        masks.append(TargetMask(idx.astype(np.int64), r, successive))
    return masks


def sample_context(n: int, p_range: tuple[float, float], targets: Sequence[TargetMask],
                   rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Context positions: a ``p_gamma`` fraction of positions minus every target position.

    Returns ``(indices, p_gamma)``; ``indices`` is sorted.
    """
    lo, hi = p_range
    if not (0 < lo <= hi <= 1):
        raise ValueError(f"p_gamma range must lie in (0, 1], got {p_range}")
    covered = np.zeros(n, dtype=bool)
    for m in targets:
        covered[m.indices] = True
    if covered.all():
        raise DegenerateContextError(f"targets cover all {n} positions")
    p = float(rng.uniform(lo, hi))
    k = min(n, max(1, round_half_up(p * n)))
    picked = np.sort(rng.choice(n, size=k, replace=False))
    ctx = picked[~covered[picked]]
    if len(ctx) == 0:
        ctx = np.flatnonzero(~covered)[:1]
    return ctx.astype(np.int64), p


@dataclass
class LevelPlan:
    """Masks for one level across a batch."""

    targets: list[list[TargetMask]]  # [B][M]
    context: list[np.ndarray]  # [B]
    p_gamma: list[float] = field(default_factory=list)

    def check_disjoint(self) -> None:
        for tg, ctx in zip(self.targets, self.context):
            for m in tg:
                if np.intersect1d(m.indices, ctx).size:
                    raise AssertionError("context overlaps a target mask")

    # padded index arrays used by the batched model ---------------------
    def context_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return pad_index_lists(self.context)

    def target_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        flat = [m.indices for tg in self.targets for m in tg]
        return pad_index_lists(flat)


def pad_index_lists(lists: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(x) for x in lists)
    idx = np.zeros((len(lists), width), dtype=np.int64)
    valid = np.zeros((len(lists), width), dtype=bool)
    for i, x in enumerate(lists):
        idx[i, : len(x)] = x
        valid[i, : len(x)] = True
    return idx, valid


def plan_level(lengths: Sequence[int], ratios: Sequence[float], count: int, p_successive: float,
               p_range: tuple[float, float], rng: np.random.Generator,
               max_tries: int = 100) -> LevelPlan:
    """Sample masks for every item; items whose targets swallow the whole
    sequence are resampled up to ``max_tries`` times."""
    targets, contexts, ps = [], [], []
    for n in lengths:
        n = int(n)
        for _ in range(max_tries):
            tg = sample_target_masks(n, ratios, count, p_successive, rng)
            try:
                ctx, p = sample_context(n, p_range, tg, rng)
            except DegenerateContextError:
                continue
            break
        else:
            raise DegenerateContextError(f"no valid context for length {n} after {max_tries} draws")
        targets.append(tg)
        contexts.append(ctx)
        ps.append(p)
    plan = LevelPlan(targets, contexts, ps)
    plan.check_disjoint()
    return plan
