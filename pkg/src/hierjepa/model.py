"""Hierarchical joint-embedding predictive model.

Each level owns a context encoder (trained), a target encoder (EMA shadow of
the context encoder), a predictor and a variance/covariance expander. Levels
are encoded top-down: the level-l attention map is upsampled and fused into
the attention of level l-1, separately inside each branch.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Parameter, Tensor, no_grad
from .data import Batch
from .hierarchy import AbstractionStack, ConvStageParams, build_abstractions
from .losses import LevelLoss, LossReport, jepa_loss, total_loss, vicreg
from .masking import LevelPlan, plan_level
from .nn import EncoderLayer, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention

INTERACTIONS = ("attention", "embed_concat", "none")
SQUASHES = ("clamp", "sigmoid", "none")


class StateError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    d: int = 256
    heads: int = 8
    ff_hidden: int = 1024
    encoder_layers: int = 1
    max_len: int = 256
    levels: int = 3
    interaction: str = "attention"
    fusion_renorm: bool = True
    deconv_squash: str = "clamp"
    conv_activation: str = "gelu"
    sigma_init: float = 0.5
    masks: int = 4
    ratios: tuple[float, ...] = (0.10, 0.15, 0.20, 0.25, 0.30)
    p_successive: float = 0.5
    p_gamma: tuple[float, float] = (0.85, 1.0)
    loss_weights: tuple[float, float, float] = (0.05, 0.15, 0.8)
    smooth_l1_beta: float = 1.0

    def __post_init__(self):
        if self.levels not in (1, 3):
            raise ValueError(f"levels must be 1 or 3, got {self.levels}")
        if self.interaction not in INTERACTIONS:
            raise ValueError(f"interaction must be one of {INTERACTIONS}")
        if self.deconv_squash not in SQUASHES:
            raise ValueError(f"deconv_squash must be one of {SQUASHES}")
        if not 1 <= self.encoder_layers <= 3:
            raise ValueError("encoder_layers must be in 1..3")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} must be divisible by heads={self.heads}")
        self.ratios = tuple(float(r) for r in self.ratios)
        self.p_gamma = tuple(float(p) for p in self.p_gamma)
        self.loss_weights = tuple(float(w) for w in self.loss_weights)

    def widths(self) -> list[int]:
        return [self.d, 2 * self.d, 4 * self.d]

    def to_dict(self) -> dict:
        return asdict(self)


class LevelEncoder(Module):
    """Transformer encoder for one level plus the parameters it uses to talk
    to the level below (``deconv_*``, ``sigma``, ``emb_up``) and above
    (``emb_fuse``)."""

    def __init__(self, d: int, cfg: ModelConfig, rng: np.random.Generator,
                 d_lower: int | None, has_upper: bool):
        self.pos = Parameter(rng.normal(0.0, 0.02, size=(cfg.max_len, d)))
        self.layers = [EncoderLayer(d, cfg.heads, cfg.ff_hidden, rng) for _ in range(cfg.encoder_layers)]
        self.norm = LayerNorm(d)
        if d_lower is not None:
            self.deconv_w = Parameter(np.array([1.0, 1.0]))
            self.deconv_b = Parameter(np.array(0.0))
            self.sigma = Parameter(np.array(cfg.sigma_init))
            self.emb_up = Linear(d, d_lower, rng)
        if has_upper:
            self.emb_fuse = Linear(2 * d, d, rng)

    def encode(self, x: Tensor, positions: np.ndarray, key_mask: np.ndarray,
               inject: Tensor | None = None, sigma: Tensor | None = None,
               renorm: bool = True) -> tuple[Tensor, Tensor]:
        """Returns (representation, head-averaged attention map of the last layer)."""
        if inject is not None and inject.shape[-2:] != (x.shape[1], x.shape[1]):
            raise ag.ShapeError(f"injected map {inject.shape} does not match length {x.shape[1]}")
        h = x + ag.getitem(self.pos, positions)
        amap = None
        for layer in self.layers:
            h, amap = layer(h, key_mask, inject, sigma, renorm)
        return self.norm(h), amap


class Predictor(Module):
    """One cross-attention block: mask-token queries read from context + queries."""

    def __init__(self, d: int, cfg: ModelConfig, rng: np.random.Generator):
        self.pos = Parameter(rng.normal(0.0, 0.02, size=(cfg.max_len, d)))
        self.mask_token = Parameter(rng.normal(0.0, 0.02, size=(d,)))
        self.norm_q = LayerNorm(d)
        self.norm_kv = LayerNorm(d)
        self.attn = MultiHeadAttention(d, cfg.heads, rng)
        self.norm2 = LayerNorm(d)
        self.ff = FeedForward(d, cfg.ff_hidden, rng)
        self.norm_out = LayerNorm(d)
        self.out = Linear(d, d, rng)

    def __call__(self, ctx: Tensor, ctx_pos: np.ndarray, ctx_valid: np.ndarray,
                 q_pos: np.ndarray, q_valid: np.ndarray) -> Tensor:
        if not q_valid.any(axis=1).all():
            raise ValueError("every prediction needs a non-empty target mask")
        kv_ctx = ctx + ag.getitem(self.pos, ctx_pos)
        q = ag.getitem(self.pos, q_pos) + self.mask_token
        kv = ag.concat([kv_ctx, q], axis=1)
        kmask = np.concatenate([ctx_valid, q_valid], axis=1)
        h, _ = self.attn(self.norm_q(q), self.norm_kv(kv), kmask)
        x = q + h
        x = x + self.ff(self.norm2(x))
        return self.out(self.norm_out(x))


class Expander(Module):
    """Single-layer MLP (d -> 2d, GELU) feeding the variance/covariance terms."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.lin = Linear(d, 2 * d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.gelu(self.lin(x))


# ---------------------------------------------------------------------------
# map plumbing
# ---------------------------------------------------------------------------

def fit_square(a: Tensor, n: int) -> Tensor:
    """Truncate (top-left) or zero-pad trailing rows/cols of (B, m, m) maps to n x n."""
    m = a.shape[-1]
    if m == n:
        return a
    if m > n:
        return a[:, :n, :n]
    B = a.shape[0]
    a = ag.concat([a, Tensor(np.zeros((B, n - m, m)))], axis=1)
    return ag.concat([a, Tensor(np.zeros((B, n, n - m)))], axis=2)


def fit_rows(x: Tensor, n: int) -> Tensor:
    m = x.shape[1]
    if m == n:
        return x
    if m > n:
        return x[:, :n]
    return ag.concat([x, Tensor(np.zeros((x.shape[0], n - m) + x.shape[2:]))], axis=1)


def scatter_map(a: Tensor, pos: np.ndarray, valid: np.ndarray, n: int) -> Tensor:
    """Place an attention map over gathered positions into full n x n coordinates."""
    rows = ag.scatter_rows(a, pos, n, valid)  # (B, n, L)
    cols = ag.scatter_rows(ag.transpose(rows, (0, 2, 1)), pos, n, valid)  # (B, n, n) transposed
    return ag.transpose(cols, (0, 2, 1))


def gather_map(a: Tensor, pos: np.ndarray) -> Tensor:
    rows = ag.gather_rows(a, pos)  # (B, L, n)
    cols = ag.gather_rows(ag.transpose(rows, (0, 2, 1)), pos)  # (B, L, L) transposed
    return ag.transpose(cols, (0, 2, 1))


def propagate_attention(amap: Tensor, upper: LevelEncoder, n_lower: int,
                        squash: str = "clamp") -> Tensor:
    """Upsample a (B, n, n) level map with the transposed conv, squash, fit to ``n_lower``."""
    up = ag.conv_transpose1d(amap, upper.deconv_w, upper.deconv_b)
    if squash == "clamp":
        up = ag.clamp(up, 0.0, 1.0)
    elif squash == "sigmoid":
        up = ag.sigmoid(up)
    return fit_square(up, n_lower)


@dataclass
class LevelView:
    """Which positions of a level a branch sees: (B, L) indices and validity."""

    pos: np.ndarray
    valid: np.ndarray
    n_full: int

    @classmethod
    def full(cls, mask: np.ndarray) -> "LevelView":
        B, n = mask.shape
        return cls(np.broadcast_to(np.arange(n), (B, n)).copy(), mask, n)


@dataclass
class LevelOutput:
    rep: Tensor  # (B, L, d_l)
    amap: Tensor  # (B, L, L)
    view: LevelView


@dataclass
class ForwardOutput:
    target: dict[int, LevelOutput]
    context: dict[int, LevelOutput]
    predictions: dict[int, Tensor]
    target_samples: dict[int, Tensor]
    query_valid: dict[int, np.ndarray]
    calls: list = field(default_factory=list)


class HierJEPAModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        w = cfg.widths()
        self.conv = ConvStageParams(cfg.d, rng, cfg.conv_activation)
        self.ctx = [LevelEncoder(w[l], cfg, rng, w[l - 1] if l > 0 else None, l < 2) for l in range(3)]
        self.predictors = [Predictor(w[l], cfg, rng) for l in range(3)]
        self.expanders = [Expander(w[l], rng) for l in range(3)]
        self.tgt = copy.deepcopy(self.ctx)

    # -- parameter groups ------------------------------------------------
    def trainable(self) -> list[tuple[str, Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("tgt.")]

    def target_parameters(self) -> list[tuple[str, Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if n.startswith("tgt.")]

    def active_levels(self) -> list[int]:
        return [0] if self.cfg.levels == 1 else [0, 1, 2]

    # -- encoding --------------------------------------------------------
    def encode_hierarchy(self, encoders: list[LevelEncoder], inputs: dict[int, Tensor],
                         views: dict[int, LevelView], calls: list | None = None) -> dict[int, LevelOutput]:
        """Top-down pass over active levels; ``inputs[l]`` are already gathered to ``views[l]``."""
        cfg = self.cfg
        out: dict[int, LevelOutput] = {}
        for l in sorted(views, reverse=True):
            x = inputs[l]
            view = views[l]
            inject = sigma = None
            upper = out.get(l + 1)
            if upper is not None and cfg.interaction == "attention":
                up_enc = encoders[l + 1]
                full = scatter_map(upper.amap, upper.view.pos, upper.view.valid, upper.view.n_full)
                tilde = propagate_attention(full, up_enc, view.n_full, cfg.deconv_squash)
                inject = gather_map(tilde, view.pos)
                sigma = up_enc.sigma
                if calls is not None:
                    calls.append(("propagate", l + 1))
            elif upper is not None and cfg.interaction == "embed_concat":
                up_enc = encoders[l + 1]
                full = ag.scatter_rows(upper.rep, upper.view.pos, upper.view.n_full, upper.view.valid)
                doubled = full[:, np.repeat(np.arange(upper.view.n_full), 2)]
                up = up_enc.emb_up(fit_rows(doubled, view.n_full))
                x = encoders[l].emb_fuse(ag.concat([x, ag.gather_rows(up, view.pos)], axis=-1))
            if calls is not None:
                calls.append(("encode", l, inject is not None))
            rep, amap = encoders[l].encode(x, view.pos, view.valid, inject, sigma, cfg.fusion_renorm)
            out[l] = LevelOutput(rep, amap, view)
        return out

    def abstractions(self, batch: Batch) -> AbstractionStack:
        return build_abstractions(batch, self.conv, self.cfg.levels)

    def sample_plans(self, stack: AbstractionStack, seed: int, step: int) -> dict[int, LevelPlan]:
        cfg = self.cfg
        plans = {}
        for l in self.active_levels():
            rng = np.random.default_rng([seed, step, l])
            plans[l] = plan_level(stack.lengths(l), cfg.ratios, cfg.masks, cfg.p_successive,
                                  cfg.p_gamma, rng)
        return plans

    def forward_hierarchy(self, stack: AbstractionStack, plans: dict[int, LevelPlan],
                          record_calls: bool = False) -> ForwardOutput:
        levels = self.active_levels()
        calls: list | None = [] if record_calls else None

        # target branch: full sequences, EMA encoders, no graph
        with no_grad():
            full_views = {l: LevelView.full(stack.level_masks[l]) for l in levels}
            tgt_in = {l: stack.levels[l].detach() for l in levels}
            target = self.encode_hierarchy(self.tgt, tgt_in, full_views, calls)

        # context branch: sampled positions with targets removed
        ctx_views, ctx_in = {}, {}
        for l in levels:
            pos, valid = plans[l].context_arrays()
            ctx_views[l] = LevelView(pos, valid, stack.levels[l].shape[1])
            ctx_in[l] = ag.gather_rows(stack.levels[l], pos)
        context = self.encode_hierarchy(self.ctx, ctx_in, ctx_views, calls)

        preds, samples, qvalid = {}, {}, {}
        M = self.cfg.masks
        for l in levels:
            B = stack.levels[l].shape[0]
            rep_idx = np.repeat(np.arange(B), M)
            q_pos, q_valid = plans[l].target_arrays()
            c = context[l]
            ctx_rep = c.rep[rep_idx]
            preds[l] = self.predictors[l](ctx_rep, c.view.pos[rep_idx], c.view.valid[rep_idx], q_pos, q_valid)
            samples[l] = Tensor(target[l].rep.data[rep_idx[:, None], q_pos])
            qvalid[l] = q_valid
        return ForwardOutput(target, context, preds, samples, qvalid, calls or [])

    def loss(self, stack: AbstractionStack, plans: dict[int, LevelPlan]) -> tuple[Tensor, LossReport, ForwardOutput]:
        fwd = self.forward_hierarchy(stack, plans)
        cfg = self.cfg
        per_level: dict[int, Tensor] = {}
        report_levels = {}
        for l in self.active_levels():
            B = stack.levels[l].shape[0]
            lj = jepa_loss(fwd.predictions[l], fwd.target_samples[l], fwd.query_valid[l], B,
                           cfg.masks, cfg.smooth_l1_beta)
            tv = fwd.target[l].view.valid
            z_tar = self.expanders[l](fwd.target[l].rep[np.nonzero(tv)])
            cv = fwd.context[l].view.valid
            z_ctx = self.expanders[l](fwd.context[l].rep[np.nonzero(cv)])
            vt, ct = vicreg(z_tar)
            vc, cc = vicreg(z_ctx)
            per_level[l + 1] = lj + vt + vc + ct + cc
            report_levels[l + 1] = LevelLoss(lj.item(), vt.item(), vc.item(), ct.item(), cc.item())
        total = total_loss(per_level, cfg.loss_weights)
        report = LossReport(report_levels, cfg.loss_weights, total.item())
        return total, report, fwd

    # -- inference -------------------------------------------------------
    def encode_full(self, batch: Batch) -> dict[int, LevelOutput]:
        stack = self.abstractions(batch)
        views = {l: LevelView.full(stack.level_masks[l]) for l in self.active_levels()}
        return self.encode_hierarchy(self.ctx, {l: stack.levels[l] for l in views}, views)

    def infer(self, batch: Batch) -> np.ndarray:
        """Mean over real positions of the level-1 context representation."""
        with no_grad():
            out = self.encode_full(batch)[0]
        rep = out.rep.data
        mask = out.view.valid[..., None]
        return (rep * mask).sum(axis=1) / mask.sum(axis=1)


def ema_update(target: list[tuple[str, Parameter]], online: list[tuple[str, Parameter]], tau: float) -> None:
    """In place: target <- tau * target + (1 - tau) * online."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if len(target) != len(online):
        raise StateError(f"registry sizes differ: {len(target)} vs {len(online)}")
    for (tn, tp), (on, op) in zip(target, online):
        if tn.split(".", 1)[1] != on.split(".", 1)[1] or tp.shape != op.shape:
            raise StateError(f"registry mismatch: {tn} vs {on}")
        tp.data *= tau
        tp.data += (1.0 - tau) * op.data


def ema_pairs(model: HierJEPAModel) -> tuple[list, list]:
    tgt = [(f"tgt.{n}", p) for n, p in _enc_params(model.tgt)]
    ctx = [(f"ctx.{n}", p) for n, p in _enc_params(model.ctx)]
    return tgt, ctx


def _enc_params(encs: list[LevelEncoder]):
    for i, e in enumerate(encs):
        for n, p in e.named_parameters(f"{i}."):
            yield n, p
