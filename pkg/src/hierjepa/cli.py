"""Command-line entry point.

Every command writes into ``--run-dir``: an echo of the effective config
(``config.ini``), then its own artifacts. Exit codes: 0 ok, 1 internal
error, 2 usage or configuration error, 3 bad input data. Set
``HIERJEPA_LOG=DEBUG`` for verbose logs.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import PROFILES, ConfigError, RunConfig
from .data import DataError, LengthError, SynthRegion, load_csv, synth_generate, write_csv
from .estimator import HierJEPA
from .evaluation import SelfSimConfig, finetune_decoder, self_similarity, write_metrics_csv
from .hexgrid import HexGridSpec, build_region_graph
from .measures import KINDS, MeasureConfig, neighbor_lists, pairwise_matrix, save_matrix, save_neighbors_csv
from .region_embed import EmbeddingTable
from .validation import grid_spec_for

logger = logging.getLogger("hierjepa")

EXIT_INTERNAL, EXIT_USAGE, EXIT_DATA = 1, 2, 3
WORLD = HexGridSpec(0.0, 0.0, 1.0)


class UsageError(Exception):
    pass


# -- configuration ---------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--run-dir", default="run", help="directory for all outputs")
    p.add_argument("--config", help="config file (INI sections)")
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    g = p.add_argument_group("config overrides")
    for f in fields(RunConfig):
        g.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, metavar="V")


def resolve_config(args) -> RunConfig:
    base = PROFILES[args.profile]
    if args.config:
        if not Path(args.config).exists():
            raise UsageError(f"config file not found: {args.config}")
        base = RunConfig.load(args.config, base=base)
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return base.replace(**overrides)


def _run_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.run_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.ini")
    return out


def _need(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} path does not exist: {path}")
    return p


def _read(path: Path, cfg: RunConfig, spec: HexGridSpec | None = None):
    return load_csv(path, spec or WORLD, min_len=cfg.min_len, max_len=cfg.max_len)


def _grid_path(table_path: Path) -> Path:
    return table_path.with_suffix(".grid.json")


def _write_summary(path: Path, cfg: RunConfig, body: str) -> None:
    path.write_text(f"config_hash {cfg.hash()}\n{body}\n")


# -- commands ----------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> int:
    out = _run_dir(args, cfg)
    region = SynthRegion(cfg.synth_center_lon, cfg.synth_center_lat, cfg.synth_width_m, cfg.synth_height_m,
                         min_len=cfg.min_len, max_len=cfg.max_len, min_step_m=cfg.synth_min_step_m,
                         max_step_m=cfg.synth_max_step_m)
    train = synth_generate(cfg.synth_count, region, cfg.seed)
    write_csv(train, out / "train.csv")
    if cfg.synth_test_count:
        test = synth_generate(cfg.synth_test_count, region, cfg.seed + 1)
        write_csv(test, out / "test.csv")
    logger.info("wrote %d train / %d test trajectories to %s", cfg.synth_count, cfg.synth_test_count, out)
    return 0


def cmd_pretrain_cells(args, cfg: RunConfig) -> int:
    data = _need(args.data, "data")
    out = _run_dir(args, cfg)
    trajs = _read(data, cfg)
    extra = []
    for path in args.extra_data or []:
        extra += _read(_need(path, "extra-data"), cfg)
    spec = grid_spec_for(trajs + extra, cfg.edge_len_m)
    graph = build_region_graph(trajs + extra, spec)
    est = HierJEPA(**cfg.estimator_params())
    emb = est.cell_embedder().fit(graph)
    table_path = out / "cells.hxem"
    emb.table_.save(table_path)
    _grid_path(table_path).write_text(json.dumps(spec.to_dict(), sort_keys=True))
    with (out / "cells_loss.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(emb.loss_curve_, 1):
            w.writerow([i, repr(float(v))])
    logger.info("embedded %d cells -> %s", len(graph), table_path)
    return 0


def _load_table(path: Path) -> tuple[EmbeddingTable, HexGridSpec]:
    grid = _grid_path(path)
    if not grid.exists():
        raise UsageError(f"grid description {grid} missing next to the table")
    return EmbeddingTable.load(path), HexGridSpec(**json.loads(grid.read_text()))


def cmd_train(args, cfg: RunConfig) -> int:
    data = _need(args.data, "data")
    if args.resume:
        est, stored = checkpoint.load(_need(args.resume, "resume"))
        if args.epochs_total is not None:
            stored = stored.replace(epochs=args.epochs_total)
            est.set_params(epochs=stored.epochs)
        cfg = stored
    out = _run_dir(args, cfg)
    if not args.resume:
        table, spec = _load_table(_need(args.table, "table"))
        est = HierJEPA(**cfg.estimator_params())
        est.initialize(table, spec)
    trajs = _read(data, cfg, est.spec_)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    log_path = out / "train_log.csv"
    fresh = not args.resume or not log_path.exists()
    fh = log_path.open("w" if fresh else "a", newline="")
    writer = csv.writer(fh)
    if fresh:
        writer.writerow(["step", "level", "component", "value"])

    def on_step(_est, step, report):
        writer.writerows((s, lvl, comp, repr(float(v))) for s, lvl, comp, v in report.rows(step))

    def on_epoch_end(e, epoch):
        fh.flush()
        digest = checkpoint.save(ckpt_dir / f"epoch_{epoch:03d}.ckpt", e, cfg)
        logger.info("epoch %d checkpoint sha256 %s", epoch, digest[:16])

    try:
        est.continue_fit(trajs, on_epoch_end=on_epoch_end, on_step=on_step)
    finally:
        fh.close()
    checkpoint.save(out / "model.ckpt", est, cfg)
    with (out / "history.csv").open("w", newline="") as hf:
        keys = sorted({k for h in est.history_ for k in h})
        w = csv.DictWriter(hf, fieldnames=keys)
        w.writeheader()
        w.writerows(est.history_)
    return 0


def cmd_eval_selfsim(args, cfg: RunConfig) -> int:
    est, stored = checkpoint.load(_need(args.checkpoint, "checkpoint"))
    data = _need(args.data, "data")
    out = _run_dir(args, cfg)
    trajs = _read(data, cfg, est.spec_)
    sim = SelfSimConfig(query_count=cfg.query_count, db_size=cfg.db_size,
                        db_fractions=tuple(cfg.db_fractions), rho_s_grid=tuple(cfg.rho_s_grid),
                        rho_d_grid=tuple(cfg.rho_d_grid), embedding_metric=cfg.embedding_metric,
                        distort_std_m=cfg.distort_std_m, seed=cfg.seed)
    if cfg.query_count >= len(trajs):
        raise DataError(f"need more than {cfg.query_count} trajectories, got {len(trajs)}")
    report = self_similarity(est, trajs[: cfg.query_count], trajs[cfg.query_count :], sim, est.spec_)
    reports = out / "reports"
    reports.mkdir(exist_ok=True)
    report.write_csv(reports / "selfsim.csv")
    _write_summary(reports / "selfsim_summary.txt", stored, report.summary())
    print(report.summary())
    return 0


def cmd_finetune(args, cfg: RunConfig) -> int:
    est, stored = checkpoint.load(_need(args.checkpoint, "checkpoint"))
    data = _need(args.data, "data")
    out = _run_dir(args, cfg)
    trajs = _read(data, cfg, est.spec_)[: cfg.finetune_count]
    rows = []
    for kind in args.measure:
        mcfg = MeasureConfig(kind, cfg.effective_eps_m if kind in ("edr", "lcss") else None)
        res = finetune_decoder(est, trajs, mcfg, est.spec_, epochs=cfg.finetune_epochs, seed=cfg.seed)
        rows += [(kind, k, v) for k, v in res.metrics.items()]
    reports = out / "reports"
    reports.mkdir(exist_ok=True)
    write_metrics_csv(rows, reports / "finetune.csv")
    body = "\n".join(f"{m:<10}{k:<8}{v:.4f}" for m, k, v in rows)
    _write_summary(reports / "finetune_summary.txt", stored, body)
    print(body)
    return 0


def cmd_measure(args, cfg: RunConfig) -> int:
    data = _need(args.data, "data")
    out = _run_dir(args, cfg)
    trajs = _read(data, cfg)
    if args.limit:
        trajs = trajs[: args.limit]
    spec = grid_spec_for(trajs, cfg.edge_len_m)
    xy = [np.stack(spec.project(t.points[:, 0], t.points[:, 1]), axis=1) for t in trajs]
    mcfg = MeasureConfig(args.kind, cfg.effective_eps_m if args.kind in ("edr", "lcss") else None)
    mat = pairwise_matrix(xy, mcfg, workers=args.workers)
    save_matrix(mat, out / f"{args.kind}.tsim", args.kind)
    ids = [t.id for t in trajs]
    save_neighbors_csv(neighbor_lists(mat, k=args.neighbors), mat, out / f"{args.kind}_neighbors.csv", ids)
    with (out / f"{args.kind}_matrix.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + ids)
        for i, row in enumerate(mat):
            w.writerow([ids[i]] + [repr(float(v)) for v in row])
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "pretrain-cells": cmd_pretrain_cells,
    "train": cmd_train,
    "eval-selfsim": cmd_eval_selfsim,
    "finetune": cmd_finetune,
    "measure": cmd_measure,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hierjepa", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic train/test trajectory CSVs")
    _add_config_flags(p)

    p = sub.add_parser("pretrain-cells", help="fit node2vec cell embeddings on the occupied hex grid")
    _add_config_flags(p)
    p.add_argument("--data")
    p.add_argument("--extra-data", nargs="*", help="more CSVs whose cells must be covered (e.g. test set)")

    p = sub.add_parser("train", help="self-supervised training with per-epoch checkpoints")
    _add_config_flags(p)
    p.add_argument("--data")
    p.add_argument("--table", help="cells.hxem from pretrain-cells")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--epochs-total", type=int, help="with --resume: train up to this epoch")

    p = sub.add_parser("eval-selfsim", help="self-similarity mean-rank report")
    _add_config_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")

    p = sub.add_parser("finetune", help="frozen-encoder decoder fit to heuristic measures")
    _add_config_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--measure", nargs="+", choices=KINDS, default=["hausdorff"])

    p = sub.add_parser("measure", help="pairwise heuristic distance matrix")
    _add_config_flags(p)
    p.add_argument("--data")
    p.add_argument("--kind", choices=KINDS, required=True)
    p.add_argument("--limit", type=int, default=0, help="use only the first N trajectories")
    p.add_argument("--neighbors", type=int, default=20)
    p.add_argument("--workers", type=int, default=1)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("HIERJEPA_LOG", "INFO").upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, LengthError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        logger.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
