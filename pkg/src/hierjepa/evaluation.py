"""Self-similarity retrieval and frozen-encoder fine-tuning protocols."""

from __future__ import annotations

import csv
import logging
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import ConfigError
from .data import Trajectory, distort, downsample, odd_even_split
from .hexgrid import HexGridSpec
from .measures import MeasureConfig, pairwise_matrix
from .nn import Adam, Linear, Module

logger = logging.getLogger(__name__)


class Encoder(Protocol):
    def transform(self, X: Sequence[Trajectory]) -> np.ndarray: ...


class InvariantViolation(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# ranking metrics
# ---------------------------------------------------------------------------

def embedding_distances(q: np.ndarray, db: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    """(Q, D) distances between query and database embeddings."""
    if metric == "euclidean":
        d2 = (q * q).sum(1)[:, None] + (db * db).sum(1)[None, :] - 2.0 * q @ db.T
        return np.sqrt(np.maximum(d2, 0.0))
    if metric == "cosine":
        qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
        dn = db / np.maximum(np.linalg.norm(db, axis=1, keepdims=True), 1e-12)
        return 1.0 - qn @ dn.T
    raise ValueError(f"unknown embedding metric {metric!r}")


def rank_of(dists: np.ndarray, true_idx: int) -> int:
    """1-based rank of ``true_idx`` when sorting ascending; ties go to the lower index."""
    d = dists[true_idx]
    return 1 + int((dists < d).sum()) + int((dists[:true_idx] == d).sum())


def _check_rankings(pred, true) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape or not np.array_equal(np.sort(pred), np.sort(true)):
        raise ValueError("rankings are over different candidate sets")
    return pred, true


def hr_at_k(pred_ranking, true_ranking, k: int) -> float:
    """Overlap of the two top-k sets divided by k."""
    pred, true = _check_rankings(pred_ranking, true_ranking)
    if len(pred) < k:
        raise ValueError(f"need at least {k} candidates, got {len(pred)}")
    return len(set(pred[:k].tolist()) & set(true[:k].tolist())) / k


def r5_at_20(pred_ranking, true_ranking) -> float:
    """Fraction of the true top-5 found in the predicted top-20."""
    pred, true = _check_rankings(pred_ranking, true_ranking)
    if len(pred) < 20:
        raise ValueError(f"need at least 20 candidates, got {len(pred)}")
    return len(set(pred[:20].tolist()) & set(true[:5].tolist())) / 5


def ranking_from_distances(row: np.ndarray, exclude: int | None = None) -> np.ndarray:
    idx = np.arange(len(row))
    order = np.lexsort((idx, row))
    if exclude is not None:
        order = order[order != exclude]
    return order


# ---------------------------------------------------------------------------
# self-similarity
# ---------------------------------------------------------------------------

@dataclass
class SelfSimConfig:
    query_count: int = 200
    db_size: int = 2000
    db_fractions: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8, 1.0)
    rho_s_grid: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5)
    rho_d_grid: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5)
    embedding_metric: str = "euclidean"
    distort_std_m: float = 7.5
    seed: int = 0

    def __post_init__(self):
        if not self.db_fractions or not self.rho_s_grid or not self.rho_d_grid:
            raise ValueError("evaluation grids must be non-empty")
        if self.query_count < 1:
            raise ValueError("query_count must be >= 1")


@dataclass
class RankRow:
    variant: str
    value: float
    mean_rank: float
    count: int
    db_size: int


@dataclass
class RankReport:
    rows: list[RankRow] = field(default_factory=list)

    def get(self, variant: str, value: float) -> RankRow:
        for r in self.rows:
            if r.variant == variant and np.isclose(r.value, value):
                return r
        raise KeyError((variant, value))

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "value", "mean_rank", "count", "db_size"])
            for r in self.rows:
                w.writerow([r.variant, repr(float(r.value)), repr(float(r.mean_rank)), r.count, r.db_size])

    def summary(self) -> str:
        """Plain-text table: one row per variant, one column per grid value."""
        lines = []
        for variant in dict.fromkeys(r.variant for r in self.rows):
            rows = [r for r in self.rows if r.variant == variant]
            head = f"{variant:<11}" + "".join(f"{r.value:>10.2f}" for r in rows)
            body = f"{'mean rank':<11}" + "".join(f"{r.mean_rank:>10.3f}" for r in rows)
            lines += [head, body]
        return "\n".join(lines)


def split_queries(queries: Sequence[Trajectory]) -> tuple[list[Trajectory], list[Trajectory]]:
    halves = [odd_even_split(q) for q in queries]
    return [a for a, _ in halves], [b for _, b in halves]


def mean_rank(q_emb: np.ndarray, db_emb: np.ndarray, metric: str = "euclidean") -> float:
    """Mean 1-based rank of database row i for query row i."""
    dist = embedding_distances(q_emb, db_emb, metric)
    return float(np.mean([rank_of(dist[i], i) for i in range(len(q_emb))]))


def _augment(trajs, fn, seed_base):
    return [fn(t, np.random.SeedSequence(list(seed_base) + [i])) for i, t in enumerate(trajs)]


def self_similarity(encoder: Encoder, queries: Sequence[Trajectory], pool: Sequence[Trajectory],
                    cfg: SelfSimConfig, spec: HexGridSpec | None = None,
                    variants: Sequence[str] = ("db_size", "downsample", "distort")) -> RankReport:
    """Mean rank of each query's even half when searched with its odd half.

    The database holds every even half plus ``db_size - query_count`` pool
    trajectories; smaller database fractions use a prefix of the same pool,
    so databases are nested.
    """
    if cfg.query_count > len(queries):
        raise ConfigError(f"query_count {cfg.query_count} > {len(queries)} available queries")
    queries = list(queries)[: cfg.query_count]
    fillers_needed = cfg.db_size - cfg.query_count
    if fillers_needed < 0 or fillers_needed > len(pool):
        raise ConfigError(f"database of {cfg.db_size} needs {fillers_needed} pool trajectories, "
                         f"have {len(pool)}")
    fillers = list(pool)[:fillers_needed]
    q_a, q_b = split_queries(queries)
    report = RankReport()

    def run(qa, db, tag, value):
        qe = encoder.transform(qa)
        de = encoder.transform(db)
        mr = mean_rank(qe, de, cfg.embedding_metric)
        report.rows.append(RankRow(tag, value, mr, len(qa), len(db)))
        logger.info("self-similarity %s=%.2f |D|=%d mean rank %.3f", tag, value, len(db), mr)

    if "db_size" in variants:
        qe = encoder.transform(q_a)
        de = encoder.transform(q_b + fillers)
        for frac in cfg.db_fractions:
            size = int(round(frac * cfg.db_size))
            if size < cfg.query_count:
                raise ConfigError(f"db fraction {frac} gives {size} < query_count")
            mr = mean_rank(qe, de[:size], cfg.embedding_metric)
            report.rows.append(RankRow("db_size", frac, mr, len(q_a), size))
    if "downsample" in variants:
        for k, rho in enumerate(cfg.rho_s_grid):
            fn = lambda t, s, rho=rho: downsample(t, rho, s)
            run(_augment(q_a, fn, (cfg.seed, 1, k, 0)),
                _augment(q_b + fillers, fn, (cfg.seed, 1, k, 1)), "downsample", rho)
    if "distort" in variants:
        if spec is None:
            raise ConfigError("distortion needs the grid spec")
        for k, rho in enumerate(cfg.rho_d_grid):
            fn = lambda t, s, rho=rho: distort(t, rho, s, spec, cfg.distort_std_m)
            run(_augment(q_a, fn, (cfg.seed, 2, k, 0)),
                _augment(q_b + fillers, fn, (cfg.seed, 2, k, 1)), "distort", rho)
    return report


# ---------------------------------------------------------------------------
# fine-tuning to heuristic measures
# ---------------------------------------------------------------------------

class PairDecoder(Module):
    """Two-layer MLP on the symmetric pair feature ``|a - b| ++ a * b``."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.hidden = Linear(2 * d, d, rng)
        self.out = Linear(d, 1, rng)
        # feature standardisation, fixed from the training pairs
        self.feat_mean = np.zeros(2 * d)
        self.feat_std = np.ones(2 * d)

    def fit_scaler(self, feats: np.ndarray) -> None:
        self.feat_mean = feats.mean(0)
        sd = feats.std(0)
        self.feat_std = np.where(sd > 1e-12, sd, 1.0)

    @staticmethod
    def pair_features(ea: np.ndarray, eb: np.ndarray) -> np.ndarray:
        return np.concatenate([np.abs(ea - eb), ea * eb], axis=-1)

    def __call__(self, feats) -> Tensor:
        x = (np.asarray(feats, dtype=np.float64) - self.feat_mean) / self.feat_std
        return ag.reshape(self.out(ag.relu(self.hidden(ag.as_tensor(x)))), (-1,))

    def predict(self, feats: np.ndarray) -> np.ndarray:
        with ag.no_grad():
            return self(feats).data


def encoder_fingerprint(encoder) -> bytes | None:
    """Serialised encoder state, or None when the object cannot be pickled."""
    if hasattr(encoder, "state_bytes"):
        return encoder.state_bytes()
    try:
        return pickle.dumps(encoder)
    except (pickle.PicklingError, AttributeError, TypeError):
        return None


@dataclass
class FinetuneResult:
    decoder: PairDecoder
    metrics: dict[str, float]
    scale: tuple[float, float]
    history: list[float]


def split_indices(n: int, seed: int, ratios=(7, 1, 2)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    order = np.random.default_rng(seed).permutation(n)
    total = sum(ratios)
    n_tr = n * ratios[0] // total
    n_va = n * ratios[1] // total
    return np.sort(order[:n_tr]), np.sort(order[n_tr : n_tr + n_va]), np.sort(order[n_tr + n_va :])


def _pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    i, j = np.triu_indices(n, k=1)
    return i, j


def retrieval_metrics(pred: np.ndarray, true: np.ndarray) -> dict[str, float]:
    """Average HR@5, HR@20 and R5@20 with every row as a query against the others."""
    n = pred.shape[0]
    hr5, hr20, r520 = [], [], []
    for q in range(n):
        pr = ranking_from_distances(pred[q], exclude=q)
        tr = ranking_from_distances(true[q], exclude=q)
        hr5.append(hr_at_k(pr, tr, 5))
        hr20.append(hr_at_k(pr, tr, 20))
        r520.append(r5_at_20(pr, tr))
    return {"hr5": float(np.mean(hr5)), "hr20": float(np.mean(hr20)), "r5_20": float(np.mean(r520))}


def finetune_decoder(encoder: Encoder, trajs: Sequence[Trajectory], measure_cfg: MeasureConfig,
                     spec: HexGridSpec, epochs: int = 50, lr: float = 1e-3, batch_size: int = 512,
                     seed: int = 0, xy: Sequence[np.ndarray] | None = None) -> FinetuneResult:
    """Train a pair decoder on frozen embeddings to regress normalised measure values.

    ``xy`` optionally supplies projected coordinates (metres) per trajectory;
    otherwise they are projected with ``spec``.
    """
    before = encoder_fingerprint(encoder)
    emb = np.asarray(encoder.transform(trajs), dtype=np.float64)
    if xy is None:
        xy = [np.stack(spec.project(t.points[:, 0], t.points[:, 1]), axis=1) for t in trajs]
    tr, va, te = split_indices(len(trajs), seed)
    if len(te) < 21:
        raise ConfigError(f"test split has {len(te)} trajectories; need >= 21 for top-20 metrics")

    gt_tr = pairwise_matrix([xy[i] for i in tr], measure_cfg)
    gt_va = pairwise_matrix([xy[i] for i in va], measure_cfg) if len(va) >= 2 else None
    gt_te = pairwise_matrix([xy[i] for i in te], measure_cfg)
    ti, tj = _pairs(len(tr))
    y_tr = gt_tr[ti, tj]
    lo, hi = float(y_tr.min()), float(y_tr.max())
    span = hi - lo if hi > lo else 1.0

    rng = np.random.default_rng(seed)
    decoder = PairDecoder(emb.shape[1], rng)
    opt = Adam(list(decoder.named_parameters()), lr=lr)
    feats_tr = PairDecoder.pair_features(emb[tr][ti], emb[tr][tj])
    decoder.fit_scaler(feats_tr)
    target = (y_tr - lo) / span

    def val_loss() -> float:
        if gt_va is None:
            return 0.0
        vi, vj = _pairs(len(va))
        f = PairDecoder.pair_features(emb[va][vi], emb[va][vj])
        return float(np.mean((decoder.predict(f) - (gt_va[vi, vj] - lo) / span) ** 2))

    best = (np.inf, decoder.state_dict())
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(target))
        for s in range(0, len(order), batch_size):
            b = order[s : s + batch_size]
            pred = decoder(feats_tr[b])
            diff = pred - target[b]
            loss = ag.mean(diff * diff)
            opt.zero_grad()
            loss.backward()
            opt.step()
        vl = val_loss()
        history.append(vl)
        if vl < best[0]:
            best = (vl, decoder.state_dict())
    decoder.load_state_dict(best[1])

    if before is None:
        # no serialisable state: re-encode a probe and demand identical output
        probe = list(trajs[:8])
        if not np.array_equal(np.asarray(encoder.transform(probe), dtype=np.float64), emb[: len(probe)]):
            raise InvariantViolation("encoder output changed during fine-tuning")
    elif encoder_fingerprint(encoder) != before:
        raise InvariantViolation("encoder parameters changed during fine-tuning")
    for name, p in getattr(getattr(encoder, "model_", None), "named_parameters", lambda: [])():
        if p.grad is not None:
            raise InvariantViolation(f"encoder parameter {name} accumulated a gradient")

    te_emb = emb[te]
    n = len(te)
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    pred_mat = decoder.predict(PairDecoder.pair_features(te_emb[ii.ravel()], te_emb[jj.ravel()])).reshape(n, n)
    metrics = retrieval_metrics(pred_mat, gt_te)
    return FinetuneResult(decoder, metrics, (lo, span), history)


def write_metrics_csv(rows: Sequence[tuple[str, str, float]], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["measure", "metric", "value"])
        for m, k, v in rows:
            w.writerow([m, k, repr(float(v))])
