"""Cell embeddings: node2vec random walks over the region graph + skip-gram.

The table maps every occupied hex cell to a ``dim``-vector; a zero PAD row is
reserved for sequence padding and is never trained.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator

from .hexgrid import HexCellId, HexGridSpec, RegionGraph, assign_xy, center_xy

logger = logging.getLogger(__name__)

TABLE_MAGIC = b"HXEM"
TABLE_VERSION = 1
UNIGRAM_TABLE = 1_000_000


class EmptyTableError(RuntimeError):
    pass


@dataclass(frozen=True)
class WalkConfig:
    walks_per_node: int = 10
    walk_len: int = 40
    return_p: float = 1.0
    inout_q: float = 1.0
    window: int = 5
    negatives: int = 5
    epochs: int = 5
    lr: float = 0.025

    def __post_init__(self):
        for name in ("walks_per_node", "walk_len", "window", "negatives", "epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.return_p <= 0 or self.inout_q <= 0:
            raise ValueError("return_p and inout_q must be > 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")


@njit(cache=True)
def _walk(indptr, indices, start, length, p, q, u, out):
    """Second-order biased walk driven by pre-drawn uniforms ``u``; returns its length."""
    out[0] = start
    if indptr[start] == indptr[start + 1]:
        return 1
    k = 1
    weights = np.empty(indices.shape[0] + 1)
    while k < length:
        cur = out[k - 1]
        lo, hi = indptr[cur], indptr[cur + 1]
        deg = hi - lo
        if deg == 0:
            break
        if k == 1:
            j = int(u[k] * deg)
            out[k] = indices[lo + min(j, deg - 1)]
            k += 1
            continue
        prev = out[k - 2]
        plo, phi = indptr[prev], indptr[prev + 1]
        total = 0.0
        for i in range(deg):
            x = indices[lo + i]
            if x == prev:
                w = 1.0 / p
            else:
                w = 1.0 / q
                for t in range(plo, phi):
                    if indices[t] == x:
                        w = 1.0
                        break
            total += w
            weights[i] = total
        target = u[k] * total
        j = 0
        while j < deg - 1 and weights[j] <= target:
            j += 1
        out[k] = indices[lo + j]
        k += 1
    return k


def _csr(graph: RegionGraph) -> tuple[np.ndarray, np.ndarray]:
    indptr = np.zeros(len(graph) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(a) for a in graph.adjacency])
    indices = np.array([x for a in graph.adjacency for x in a], dtype=np.int64)
    return indptr, indices


def random_walks(graph: RegionGraph, cfg: WalkConfig, seed: int) -> list[list[int]]:
    """``walks_per_node`` second-order biased walks from every node.

    Each start node draws from its own RNG stream, so the result does not
    depend on traversal order. Walks are returned round-major.
    """
    if len(graph) == 0:
        raise ValueError("graph has no nodes")
    indptr, indices = _csr(graph)
    buf = np.empty(cfg.walk_len, dtype=np.int64)
    per_node = []
    for v in range(len(graph)):
        u = np.random.default_rng([seed, v]).random((cfg.walks_per_node, cfg.walk_len))
        walks_v = []
        for k in range(cfg.walks_per_node):
            n = _walk(indptr, indices, v, cfg.walk_len, cfg.return_p, cfg.inout_q, u[k], buf)
            walks_v.append(buf[:n].tolist())
        per_node.append(walks_v)
    return [per_node[v][k] for k in range(cfg.walks_per_node) for v in range(len(graph))]


def skipgram_pairs(walks: list[list[int]], window: int) -> np.ndarray:
    """(center, context) pairs within ``window`` steps, in walk order."""
    by_len: dict[int, list[int]] = {}
    for i, w in enumerate(walks):
        by_len.setdefault(len(w), []).append(i)
    out = []
    for n, ids in by_len.items():
        arr = np.asarray([walks[i] for i in ids], dtype=np.int64)  # (W, n)
        for off in range(-window, window + 1):
            if off == 0 or abs(off) >= n:
                continue
            lo, hi = max(0, -off), min(n, n - off)
            c = arr[:, lo:hi]
            o = arr[:, lo + off : hi + off]
            pos = np.broadcast_to(np.arange(lo, hi), c.shape)
            out.append((np.repeat(np.asarray(ids)[:, None], hi - lo, 1).ravel(), pos.ravel(),
                        np.full(c.size, off), c.ravel(), o.ravel()))
    if not out:
        return np.zeros((0, 2), dtype=np.int64)
    wid, pos, off, c, o = (np.concatenate(x) for x in zip(*out))
    order = np.lexsort((off, pos, wid))
    return np.stack([c[order], o[order]], axis=1)


@njit(cache=True)
def _sgns_epoch(w_in, w_out, pairs, negs, lr0, lr_end, step0, total):
    """Sequential SGD over (center, context) pairs; returns summed loss."""
    dim = w_in.shape[1]
    loss = 0.0
    grad_c = np.empty(dim)
    for t in range(pairs.shape[0]):
        frac = (step0 + t) / total
        lr = lr0 + (lr_end - lr0) * frac
        c = pairs[t, 0]
        grad_c[:] = 0.0
        for k in range(negs.shape[1] + 1):
            if k == 0:
                o = pairs[t, 1]
                label = 1.0
            else:
                o = negs[t, k - 1]
                label = 0.0
            s = 0.0
            for j in range(dim):
                s += w_in[c, j] * w_out[o, j]
            if s > 30.0:
                s = 30.0
            elif s < -30.0:
                s = -30.0
            sig = 1.0 / (1.0 + np.exp(-s))
            if label > 0:
                loss -= np.log(sig + 1e-12)
            else:
                loss -= np.log(1.0 - sig + 1e-12)
            g = (label - sig) * lr
            for j in range(dim):
                grad_c[j] += g * w_out[o, j]
                w_out[o, j] += g * w_in[c, j]
        for j in range(dim):
            w_in[c, j] += grad_c[j]
    return loss


def train_skipgram(walks: list[list[int]], n_nodes: int, dim: int, cfg: WalkConfig,
                   seed: int) -> tuple[np.ndarray, list[float]]:
    """Skip-gram with negative sampling; returns (vectors, mean loss per epoch)."""
    if dim <= 0:
        raise ValueError(f"embedding dim must be > 0, got {dim}")
    if not walks:
        raise ValueError("no walks to train on")
    rng = np.random.default_rng(seed)
    w_in = (rng.random((n_nodes, dim)) - 0.5) / dim
    w_out = np.zeros((n_nodes, dim))
    pairs = skipgram_pairs(walks, cfg.window)
    losses: list[float] = []
    if len(pairs) == 0:
        losses = [0.0] * cfg.epochs
        return w_in, losses
    counts = np.bincount(pairs[:, 0], minlength=n_nodes).astype(np.float64) ** 0.75
    # word2vec-style unigram^0.75 table; sampling is then a uniform integer draw
    unigram = np.repeat(np.arange(n_nodes), np.round(counts / counts.sum() * UNIGRAM_TABLE).astype(np.int64))
    total = float(len(pairs) * cfg.epochs)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        negs = unigram[rng.integers(0, len(unigram), size=(len(pairs), cfg.negatives))]
        loss = _sgns_epoch(w_in, w_out, pairs[order], negs, cfg.lr, cfg.lr * 1e-4,
                           float(epoch * len(pairs)), total)
        losses.append(loss / len(pairs))
        logger.info("skipgram epoch %d/%d loss %.4f", epoch + 1, cfg.epochs, losses[-1])
    return w_in, losses


class EmbeddingTable:
    """Cell -> vector map with nearest-trained-cell fallback for unseen cells."""

    def __init__(self, cells: np.ndarray, vectors: np.ndarray):
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2 or len(vectors) != len(cells):
            raise ValueError("cells and vectors disagree in length")
        self.cells = cells
        self.vectors = vectors
        self.dim = vectors.shape[1]
        self.index = {(int(q), int(r)): i for i, (q, r) in enumerate(cells)}
        self._tree: cKDTree | None = None

    @property
    def pad_index(self) -> int:
        return len(self.cells)

    @property
    def padded_vectors(self) -> np.ndarray:
        """Vectors with the zero PAD row appended at ``pad_index``."""
        return np.vstack([self.vectors, np.zeros((1, self.dim))])

    def __len__(self) -> int:
        return len(self.cells)

    def __eq__(self, other) -> bool:
        return (isinstance(other, EmbeddingTable) and np.array_equal(self.cells, other.cells)
                and np.array_equal(self.vectors, other.vectors))

    def _nearest(self, q: np.ndarray, r: np.ndarray) -> np.ndarray:
        if self._tree is None:
            cx, cy = center_xy(self.cells[:, 0], self.cells[:, 1], 1.0)
            self._tree = cKDTree(np.stack([cx, cy], axis=1))
        qx, qy = center_xy(q, r, 1.0)
        _, idx = self._tree.query(np.stack([qx, qy], axis=1))
        return np.asarray(idx, dtype=np.int64)

    def rows_for_cells(self, qr: np.ndarray) -> np.ndarray:
        """Row index per (q, r); unseen cells resolve to the nearest trained cell."""
        if len(self.cells) == 0:
            raise EmptyTableError("embedding table is empty")
        qr = np.asarray(qr, dtype=np.int64).reshape(-1, 2)
        rows = np.fromiter((self.index.get((int(q), int(r)), -1) for q, r in qr),
                           dtype=np.int64, count=len(qr))
        miss = rows < 0
        if miss.any():
            rows[miss] = self._nearest(qr[miss, 0], qr[miss, 1])
        return rows

    def rows_for_points(self, points: np.ndarray, spec: HexGridSpec) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        x, y = spec.project(pts[:, 0], pts[:, 1])
        q, r = assign_xy(x, y, spec.edge_len_m)
        return self.rows_for_cells(np.stack([q, r], axis=1))

    def lookup_cell(self, cell: HexCellId) -> np.ndarray:
        return self.vectors[self.rows_for_cells(np.array([cell]))[0]]

    def to_bytes(self) -> bytes:
        rec = np.dtype([("q", "<i4"), ("r", "<i4"), ("v", "<f8", (self.dim,))])
        arr = np.empty(len(self.cells), dtype=rec)
        arr["q"] = self.cells[:, 0]
        arr["r"] = self.cells[:, 1]
        arr["v"] = self.vectors
        head = TABLE_MAGIC + struct.pack("<III", TABLE_VERSION, self.dim, len(self.cells))
        return head + arr.tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "EmbeddingTable":
        if blob[:4] != TABLE_MAGIC:
            raise ValueError("not an embedding table (bad magic)")
        version, dim, count = struct.unpack_from("<III", blob, 4)
        if version != TABLE_VERSION:
            raise ValueError(f"unsupported table version {version}")
        rec = np.dtype([("q", "<i4"), ("r", "<i4"), ("v", "<f8", (dim,))])
        arr = np.frombuffer(blob, dtype=rec, count=count, offset=16)
        cells = np.stack([arr["q"], arr["r"]], axis=1).astype(np.int64)
        return cls(cells, np.array(arr["v"], dtype=np.float64).reshape(count, dim))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        return cls.from_bytes(Path(path).read_bytes())


def lookup(point, table: EmbeddingTable, spec: HexGridSpec) -> np.ndarray:
    """Embedding of the cell containing (lon, lat)."""
    return table.vectors[table.rows_for_points(np.asarray(point)[None], spec)[0]]


class Node2VecCellEmbedder(BaseEstimator):
    """Estimator wrapper: ``fit(graph)`` learns ``table_``."""

    def __init__(self, dim: int = 256, walks_per_node: int = 10, walk_len: int = 40,
                 return_p: float = 1.0, inout_q: float = 1.0, window: int = 5,
                 negatives: int = 5, epochs: int = 5, lr: float = 0.025,
                 random_state: int = 0):
        self.dim = dim
        self.walks_per_node = walks_per_node
        self.walk_len = walk_len
        self.return_p = return_p
        self.inout_q = inout_q
        self.window = window
        self.negatives = negatives
        self.epochs = epochs
        self.lr = lr
        self.random_state = random_state

    def walk_config(self) -> WalkConfig:
        return WalkConfig(self.walks_per_node, self.walk_len, self.return_p, self.inout_q,
                          self.window, self.negatives, self.epochs, self.lr)

    def fit(self, graph: RegionGraph, y=None) -> "Node2VecCellEmbedder":
        cfg = self.walk_config()
        walks = random_walks(graph, cfg, self.random_state)
        vectors, losses = train_skipgram(walks, len(graph), self.dim, cfg, self.random_state + 1)
        self.loss_curve_ = losses
        self.table_ = EmbeddingTable(np.asarray(graph.nodes, dtype=np.int64), vectors)
        return self
