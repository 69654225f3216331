"""Scikit-learn style front end: ``HierJEPA().fit(trajectories).transform(trajectories)``."""

from __future__ import annotations

import logging
import math
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .autograd import NumericError
from .data import Trajectory, batch_from_rows, cell_rows
from .hexgrid import HexGridSpec, build_region_graph
from .model import HierJEPAModel, ModelConfig, StateError, ema_pairs, ema_update
from .nn import Adam
from .region_embed import EmbeddingTable, Node2VecCellEmbedder
from .validation import check_trajectories, grid_spec_for

logger = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, msg: str, epoch: int, step: int, batch_seed: tuple):
        super().__init__(msg)
        self.epoch = epoch
        self.step = step
        self.batch_seed = batch_seed


class HierJEPA(TransformerMixin, BaseEstimator):
    """Self-supervised trajectory encoder.

    ``fit`` tokenises points onto a hex grid, pretrains cell embeddings
    (unless a table is supplied), then trains the hierarchical predictive
    model. ``transform`` returns one ``d``-vector per trajectory.
    """

    def __init__(self, d: int = 256, heads: int = 8, ff_hidden: int = 1024, encoder_layers: int = 1,
                 levels: int = 3, interaction: str = "attention", fusion_renorm: bool = True,
                 deconv_squash: str = "clamp", conv_activation: str = "gelu", sigma_init: float = 0.5,
                 masks: int = 4, ratios: tuple = (0.10, 0.15, 0.20, 0.25, 0.30),
                 p_successive: float = 0.5, p_gamma: tuple = (0.85, 1.0),
                 loss_weights: tuple = (0.05, 0.15, 0.8), smooth_l1_beta: float = 1.0,
                 tau: float = 0.996, lr: float = 1e-4, lr_decay_every: int = 5, lr_decay: float = 0.5,
                 epochs: int = 20, batch_size: int = 64, max_len: int = 200, edge_len_m: float = 25.0,
                 walks_per_node: int = 10, walk_len: int = 40, return_p: float = 1.0,
                 inout_q: float = 1.0, window: int = 5, negatives: int = 5, walk_epochs: int = 5,
                 walk_lr: float = 0.025, random_state: int = 0):
        self.d = d
        self.heads = heads
        self.ff_hidden = ff_hidden
        self.encoder_layers = encoder_layers
        self.levels = levels
        self.interaction = interaction
        self.fusion_renorm = fusion_renorm
        self.deconv_squash = deconv_squash
        self.conv_activation = conv_activation
        self.sigma_init = sigma_init
        self.masks = masks
        self.ratios = ratios
        self.p_successive = p_successive
        self.p_gamma = p_gamma
        self.loss_weights = loss_weights
        self.smooth_l1_beta = smooth_l1_beta
        self.tau = tau
        self.lr = lr
        self.lr_decay_every = lr_decay_every
        self.lr_decay = lr_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.max_len = max_len
        self.edge_len_m = edge_len_m
        self.walks_per_node = walks_per_node
        self.walk_len = walk_len
        self.return_p = return_p
        self.inout_q = inout_q
        self.window = window
        self.negatives = negatives
        self.walk_epochs = walk_epochs
        self.walk_lr = walk_lr
        self.random_state = random_state

    # -- construction ----------------------------------------------------
    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d=self.d, heads=self.heads, ff_hidden=self.ff_hidden, encoder_layers=self.encoder_layers,
            max_len=self.max_len, levels=self.levels, interaction=self.interaction,
            fusion_renorm=self.fusion_renorm, deconv_squash=self.deconv_squash,
            conv_activation=self.conv_activation, sigma_init=self.sigma_init, masks=self.masks,
            ratios=tuple(self.ratios), p_successive=self.p_successive, p_gamma=tuple(self.p_gamma),
            loss_weights=tuple(self.loss_weights), smooth_l1_beta=self.smooth_l1_beta)

    def cell_embedder(self) -> Node2VecCellEmbedder:
        return Node2VecCellEmbedder(
            dim=self.d, walks_per_node=self.walks_per_node, walk_len=self.walk_len,
            return_p=self.return_p, inout_q=self.inout_q, window=self.window,
            negatives=self.negatives, epochs=self.walk_epochs, lr=self.walk_lr,
            random_state=self.random_state)

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)

    def initialize(self, table: EmbeddingTable, spec: HexGridSpec) -> "HierJEPA":
        """Set up model and optimizer state without training."""
        if table.dim != self.d:
            raise ValueError(f"cell table width {table.dim} != d={self.d}")
        self.table_ = table
        self.spec_ = spec
        self.model_ = HierJEPAModel(self.model_config(), seed=self.random_state)
        self.optimizer_ = Adam(self.model_.trainable(), lr=self.lr)
        self.epoch_ = 0
        self.step_ = 0
        self.history_: list[dict] = []
        return self

    # -- training --------------------------------------------------------
    def fit(self, X: Sequence[Trajectory], y=None, table: EmbeddingTable | None = None,
            spec: HexGridSpec | None = None,
            on_epoch_end: Callable[["HierJEPA", int], None] | None = None,
            on_step: Callable[["HierJEPA", int, object], None] | None = None) -> "HierJEPA":
        X = check_trajectories(X, min_len=4, max_len=self.max_len)
        if spec is None:
            spec = grid_spec_for(X, self.edge_len_m)
        if table is None:
            graph = build_region_graph(X, spec)
            table = self.cell_embedder().fit(graph).table_
        self.initialize(table, spec)
        return self.continue_fit(X, on_epoch_end=on_epoch_end, on_step=on_step)

    def continue_fit(self, X: Sequence[Trajectory], epochs: int | None = None,
                     on_epoch_end=None, on_step=None) -> "HierJEPA":
        """Train from the current epoch up to ``epochs`` (default ``self.epochs``)."""
        check_is_fitted(self, "model_")
        X = check_trajectories(X, min_len=4, max_len=self.max_len)
        rows = cell_rows(X, self.table_, self.spec_)
        target_epochs = self.epochs if epochs is None else epochs
        model, opt = self.model_, self.optimizer_
        tgt, ctx = ema_pairs(model)
        while self.epoch_ < target_epochs:
            epoch = self.epoch_
            opt.lr = self.lr_at(epoch)
            order = np.random.default_rng([self.random_state, 7919, epoch]).permutation(len(rows))
            sums: dict[str, float] = {}
            n_steps = 0
            for start in range(0, len(order), self.batch_size):
                idx = order[start : start + self.batch_size]
                if len(idx) < 2:
                    continue
                batch = batch_from_rows([rows[i] for i in idx], self.table_)
                stack = model.abstractions(batch)
                plans = model.sample_plans(stack, self.random_state, self.step_)
                try:
                    loss, report, _ = model.loss(stack, plans)
                except NumericError as exc:
                    raise TrainingDivergedError(
                        f"numeric failure at epoch {epoch} step {self.step_}: {exc}",
                        epoch, self.step_, (self.random_state, self.step_)) from exc
                if not math.isfinite(report.total):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch} step {self.step_}; batch seed "
                        f"({self.random_state}, {self.step_}) items {idx[:8].tolist()}...",
                        epoch, self.step_, (self.random_state, self.step_))
                opt.zero_grad()
                model.zero_grad()
                loss.backward()
                for name, p in model.target_parameters():
                    if p.grad is not None:
                        raise StateError(f"target parameter {name} received a gradient")
                opt.step()
                ema_update(tgt, ctx, self.tau)
                if on_step is not None:
                    on_step(self, self.step_, report)
                self._accumulate(sums, report)
                n_steps += 1
                self.step_ += 1
            record = {k: v / max(n_steps, 1) for k, v in sums.items()}
            record.update(epoch=epoch + 1, steps=n_steps, lr=opt.lr)
            self.history_.append(record)
            logger.info("epoch %d loss %.4f jepa %.4f var %.4f", epoch + 1, record.get("total", 0.0),
                        record.get("jepa", 0.0), record.get("var", 0.0))
            self.epoch_ += 1
            if on_epoch_end is not None:
                on_epoch_end(self, self.epoch_)
        return self

    @staticmethod
    def _accumulate(sums: dict, report) -> None:
        def add(key, val):
            sums[key] = sums.get(key, 0.0) + val

        add("total", report.total)
        levels = report.levels
        add("jepa", sum(ll.jepa for ll in levels.values()) / len(levels))
        add("var", sum(ll.var_ctx + ll.var_tar for ll in levels.values()) / (2 * len(levels)))
        add("cov", sum(ll.cov_ctx + ll.cov_tar for ll in levels.values()) / (2 * len(levels)))
        for lvl, ll in levels.items():
            add(f"l{lvl}_total", ll.total)
            add(f"l{lvl}_var_ctx", ll.var_ctx)

    # -- inference -------------------------------------------------------
    def transform(self, X: Sequence[Trajectory], batch_size: int | None = None) -> np.ndarray:
        """One vector per trajectory: mean of the level-1 context representation."""
        try:
            check_is_fitted(self, "model_")
        except NotFittedError as exc:
            raise StateError("model is not trained") from exc
        X = check_trajectories(X, min_len=4, max_len=self.max_len)
        rows = cell_rows(X, self.table_, self.spec_)
        bs = batch_size or max(self.batch_size, 64)
        # batching by length keeps padding small; results do not depend on it
        order = np.argsort([len(r) for r in rows], kind="stable")
        out = np.empty((len(rows), self.d))
        for start in range(0, len(order), bs):
            idx = order[start : start + bs]
            out[idx] = self.model_.infer(batch_from_rows([rows[i] for i in idx], self.table_))
        return out

    def state_bytes(self) -> bytes:
        """Raw parameter bytes in registry order (used to verify freezing)."""
        check_is_fitted(self, "model_")
        return b"".join(p.data.tobytes() for _, p in self.model_.named_parameters())
