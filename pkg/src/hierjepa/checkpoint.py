"""Binary checkpoints holding parameters, EMA shadows, optimizer moments, the cell table and grid.

Layout (little-endian)::

    b"HJCK" | u32 version | 64-byte ascii config hash | u32 meta_len | meta JSON
    u32 n_records | records | u32 table_len | table bytes

A record is ``u8 kind | u16 name_len | name | u8 ndim | u32[ndim] shape | f8 payload``
with kind 0 = parameter, 1 = EMA shadow, 2 = first moment, 3 = second moment.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .config import RunConfig
from .estimator import HierJEPA
from .hexgrid import HexGridSpec
from .region_embed import EmbeddingTable

MAGIC = b"HJCK"
VERSION = 1
PARAM, SHADOW, MOMENT1, MOMENT2 = 0, 1, 2, 3


class CheckpointError(ValueError):
    pass


def _record(kind: int, name: str, arr: np.ndarray) -> bytes:
    nb = name.encode()
    arr = np.asarray(arr, dtype="<f8")
    head = struct.pack("<BH", kind, len(nb)) + nb + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr).tobytes()


def to_bytes(est: HierJEPA, config: RunConfig) -> bytes:
    model, opt = est.model_, est.optimizer_
    meta = {
        "config": config.to_dict(),
        "epoch": est.epoch_,
        "step": est.step_,
        "adam_t": opt.t,
        "lr": opt.lr,
        "history": est.history_,
        "spec": est.spec_.to_dict(),
    }
    mb = json.dumps(meta, sort_keys=True).encode()
    records = []
    for name, p in model.named_parameters():
        records.append(_record(SHADOW if name.startswith("tgt.") else PARAM, name, p.data))
    for name, _ in opt.params:
        records.append(_record(MOMENT1, name, opt.m[name]))
        records.append(_record(MOMENT2, name, opt.v[name]))
    table = est.table_.to_bytes()
    out = [MAGIC, struct.pack("<I", VERSION), config.hash().encode("ascii"),
           struct.pack("<I", len(mb)), mb, struct.pack("<I", len(records)), *records,
           struct.pack("<I", len(table)), table]
    return b"".join(out)


def save(path, est: HierJEPA, config: RunConfig) -> str:
    """Write a checkpoint; returns its sha256 hex digest."""
    blob = to_bytes(est, config)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def from_bytes(blob: bytes) -> tuple[HierJEPA, RunConfig]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    stored_hash = blob[8:72].decode("ascii")
    (mlen,) = struct.unpack_from("<I", blob, 72)
    meta = json.loads(blob[76 : 76 + mlen])
    config = RunConfig.from_dict(meta["config"])
    if config.hash() != stored_hash:
        raise CheckpointError("config hash mismatch; file is corrupt or was edited")
    off = 76 + mlen
    (n_rec,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors: dict[int, dict[str, np.ndarray]] = {k: {} for k in (PARAM, SHADOW, MOMENT1, MOMENT2)}
    for _ in range(n_rec):
        kind, nlen = struct.unpack_from("<BH", blob, off)
        off += 3
        name = blob[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        tensors[kind][name] = np.frombuffer(blob, "<f8", count, off).reshape(shape).astype(np.float64)
        off += 8 * count
    (tlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    table = EmbeddingTable.from_bytes(blob[off : off + tlen])

    est = HierJEPA(**config.estimator_params())
    est.initialize(table, HexGridSpec(**meta["spec"]))
    model, opt = est.model_, est.optimizer_
    expected = {n for n, _ in model.named_parameters()}
    stored = set(tensors[PARAM]) | set(tensors[SHADOW])
    if expected != stored:
        raise CheckpointError(f"parameter registry mismatch: {sorted(expected ^ stored)[:5]}")
    for name, p in model.named_parameters():
        src = tensors[SHADOW if name.startswith("tgt.") else PARAM][name]
        if src.shape != p.shape:
            raise CheckpointError(f"{name}: shape {src.shape} != {p.shape}")
        p.data[...] = src
    for name, _ in opt.params:
        opt.m[name][...] = tensors[MOMENT1][name]
        opt.v[name][...] = tensors[MOMENT2][name]
    opt.t = meta["adam_t"]
    opt.lr = meta["lr"]
    est.epoch_ = meta["epoch"]
    est.step_ = meta["step"]
    est.history_ = meta["history"]
    return est, config


def load(path) -> tuple[HierJEPA, RunConfig]:
    return from_bytes(Path(path).read_bytes())
