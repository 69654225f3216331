"""Per-level prediction loss, variance/covariance regularisation and the level mix."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor

VAR_EPS = 1e-4
DEFAULT_WEIGHTS = (0.05, 0.15, 0.8)


def jepa_loss(pred: Tensor, target: Tensor, valid: np.ndarray, n_items: int, n_masks: int,
              beta: float = 1.0) -> Tensor:
    """SmoothL1 summed over positions and channels, averaged over items and masks.

    ``pred`` and ``target`` are (n_items * n_masks, L, d) with padded rows
    flagged False in ``valid``.
    """
    if pred.shape != target.shape:
        raise ag.ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    per = ag.smooth_l1(pred, target, beta) * valid[..., None]
    return ag.tsum(per) * (1.0 / (n_items * n_masks))


def jepa_loss_lists(preds: list[list[np.ndarray]], targets: list[list[np.ndarray]],
                    beta: float = 1.0) -> float:
    """Reference form over nested ``[batch][mask]`` arrays of shape (|M_i|, d)."""
    B = len(preds)
    M = len(preds[0])
    total = 0.0
    for pb, tb in zip(preds, targets):
        for p, t in zip(pb, tb):
            p, t = np.asarray(p), np.asarray(t)
            if p.shape != t.shape:
                raise ag.ShapeError(f"prediction {p.shape} vs target {t.shape}")
            total += float(ag.smooth_l1(p, t, beta).data.sum())
    return total / (B * M)


def vicreg(z: Tensor) -> tuple[Tensor, Tensor]:
    """Variance hinge and off-diagonal covariance penalty on (samples, dim) rows."""
    z = ag.as_tensor(z)
    n, dim = z.shape
    if n < 2:
        raise ValueError(f"vicreg needs >= 2 samples, got {n}")
    var = ag.variance(z, axis=0)
    std = ag.sqrt(var + VAR_EPS)
    var_loss = ag.mean(ag.relu(1.0 - std))
    cov = ag.covariance(z)
    off = np.ones((dim, dim)) - np.eye(dim)
    cov_loss = ag.tsum(cov * cov * off) * (1.0 / dim)
    return var_loss, cov_loss


@dataclass
class LevelLoss:
    jepa: float
    var_tar: float
    var_ctx: float
    cov_tar: float
    cov_ctx: float

    @property
    def total(self) -> float:
        return self.jepa + self.var_tar + self.var_ctx + self.cov_tar + self.cov_ctx


@dataclass
class LossReport:
    levels: dict[int, LevelLoss]
    weights: tuple[float, float, float] = DEFAULT_WEIGHTS
    total: float = 0.0
    extra: dict = field(default_factory=dict)

    def rows(self, step: int) -> list[tuple[int, int, str, float]]:
        out = []
        for lvl, ll in sorted(self.levels.items()):
            for comp in ("jepa", "var_tar", "var_ctx", "cov_tar", "cov_ctx"):
                out.append((step, lvl, comp, getattr(ll, comp)))
            out.append((step, lvl, "total_level", ll.total))
        out.append((step, 0, "total", self.total))
        return out


def total_loss(level_losses, weights=DEFAULT_WEIGHTS):
    """Weighted sum of the three level losses (missing levels count as 0).

    Works on floats or tensors; ``level_losses`` is a mapping level -> loss
    or a sequence ordered from level 1.
    """
    if any(w < 0 for w in weights):
        raise ValueError(f"loss weights must be >= 0, got {weights}")
    if not isinstance(level_losses, dict):
        level_losses = {i + 1: v for i, v in enumerate(level_losses)}
    total = 0.0
    for lvl, w in zip((1, 2, 3), weights):
        if lvl in level_losses:
            total = total + w * level_losses[lvl]
    return total
