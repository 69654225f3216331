"""Three-level abstraction stack: conv at full length, then conv + 2x max-pool twice.

Widths go d -> 2d -> 4d and lengths n -> n//2 -> n//4 (floor chain).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor
from .data import Batch, LengthError
from .nn import Module

KERNEL = 3


class ConvStage(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, k: int = KERNEL):
        bound = np.sqrt(6.0 / (k * c_in + c_out))
        self.weight = Parameter(rng.uniform(-bound, bound, size=(k, c_in, c_out)))
        self.bias = Parameter(np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.conv1d(x, self.weight, self.bias)


class ConvStageParams(Module):
    """Conv kernels for the three levels, shared by the target and context branches."""

    def __init__(self, d: int, rng: np.random.Generator, activation: str = "gelu"):
        if activation not in ("gelu", "none"):
            raise ValueError(f"conv_activation must be gelu|none, got {activation!r}")
        self.stages = [ConvStage(d, d, rng), ConvStage(d, 2 * d, rng), ConvStage(2 * d, 4 * d, rng)]
        self.activation = activation

    def act(self, x: Tensor) -> Tensor:
        return ag.gelu(x) if self.activation == "gelu" else x


def pool_mask(mask: np.ndarray) -> np.ndarray:
    """Next-level pad mask: a pooled slot is real only when both sources are real.

    This keeps every trajectory on its own floor-length chain regardless of
    how much padding the batch adds.
    """
    m = mask.shape[-1] // 2
    return mask[..., 0 : 2 * m : 2] & mask[..., 1 : 2 * m : 2]


def level_lengths(n: int, levels: int = 3) -> list[int]:
    out = [n]
    for _ in range(levels - 1):
        out.append(out[-1] // 2)
    return out


@dataclass
class AbstractionStack:
    levels: list[Tensor]  # (B, n_l, d_l)
    level_masks: list[np.ndarray]  # (B, n_l)

    @property
    def t1(self) -> Tensor:
        return self.levels[0]

    @property
    def t2(self) -> Tensor:
        return self.levels[1]

    @property
    def t3(self) -> Tensor:
        return self.levels[2]

    def lengths(self, level: int) -> np.ndarray:
        return self.level_masks[level].sum(axis=1)


def build_abstractions(batch: Batch, params: ConvStageParams, levels: int = 3) -> AbstractionStack:
    """Run the conv/pool pipeline over a padded batch.

    Pad slots are re-zeroed after every stage so padding never leaks into
    real positions through the next convolution.
    """
    if levels not in (1, 3):
        raise ValueError(f"levels must be 1 or 3, got {levels}")
    if int(batch.lengths.min()) < 4:
        raise LengthError(f"trajectories need >= 4 points, got {int(batch.lengths.min())}")
    x = Tensor(batch.embeddings)
    mask = batch.pad_mask
    t1 = params.stages[0](x) * mask[..., None]
    out = [t1]
    masks = [mask]
    for stage in params.stages[1:levels]:
        h = params.act(stage(out[-1]))
        nxt = pool_mask(masks[-1])
        out.append(ag.maxpool1d(h) * nxt[..., None])
        masks.append(nxt)
    return AbstractionStack(out, masks)
