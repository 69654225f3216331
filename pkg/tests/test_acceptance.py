"""Acceptance criteria. Each test prints one PASS/FAIL line and then asserts it.

Criteria 7-9 share a single desk-scale run (module fixture ``desk``), which
takes several minutes on one core.
"""

import hashlib
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE
from hierjepa import autograd as ag
from hierjepa.autograd import Parameter, Tensor
from hierjepa.cli import main as cli_main
from hierjepa.config import PROFILES
from hierjepa.data import SynthRegion, Trajectory, batch_from_rows, synth_generate
from hierjepa.estimator import HierJEPA
from hierjepa.evaluation import SelfSimConfig, finetune_decoder, self_similarity
from hierjepa.hexgrid import build_region_graph
from hierjepa.hierarchy import ConvStageParams, build_abstractions
from hierjepa.masking import plan_level
from hierjepa.measures import MeasureConfig, discrete_frechet, edr, hausdorff, lcss_length
from hierjepa.model import HierJEPAModel, ModelConfig, ema_pairs, ema_update, propagate_attention
from hierjepa.nn import MultiHeadAttention
from hierjepa.region_embed import EmbeddingTable
from hierjepa.validation import grid_spec_for
from oracles import edr_rec, frechet_rec, hausdorff_brute, lcss_rec, random_pair


def verdict(capsys, n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


def P(a):
    return Parameter(np.array(a, dtype=np.float64))


# ---------------------------------------------------------------------------
# 1. autodiff integrity
# ---------------------------------------------------------------------------

def _op_cases(rng):
    x44 = rng.standard_normal((4, 4))
    x44 = np.where(np.abs(x44) < 0.02, 0.05, x44)  # keep away from kinks
    x44 = np.where(np.abs(x44 + 0.5) < 0.02, -0.55, x44)
    x44 = np.where(np.abs(x44 - 0.7) < 0.02, 0.75, x44)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    idx = np.array([[0, 3, 1], [4, 2, 0]])  # scatter targets must be distinct
    valid = np.array([[True, True, True], [True, True, False]])
    return {
        "add": (ag.add, [a, b]), "sub": (ag.sub, [a, b]), "mul": (ag.mul, [a, b]),
        "div": (lambda u, v: ag.div(u, ag.add(ag.mul(v, v), 1.0)), [a, b]),
        "neg": (ag.neg, [x44]), "power": (lambda u: ag.power(u, 3.0), [x44]), "exp": (ag.exp, [x44]),
        "log": (lambda u: ag.log(ag.add(ag.mul(u, u), 1.0)), [x44]),
        "sqrt": (lambda u: ag.sqrt(ag.add(ag.mul(u, u), 0.5)), [x44]),
        "abs": (ag.tabs, [x44]), "relu": (ag.relu, [x44]), "sigmoid": (ag.sigmoid, [x44]),
        "gelu": (ag.gelu, [x44]), "clamp": (lambda u: ag.clamp(u, -0.5, 0.7), [x44]),
        "where": (lambda u, v: ag.where(np.eye(3, 4, dtype=bool), u, v), [a, b]),
        "sum": (lambda u: ag.tsum(u, axis=1, keepdims=True), [x44]),
        "mean": (lambda u: ag.mean(u, axis=0), [x44]),
        "variance": (lambda u: ag.variance(u, axis=0), [x44]), "covariance": (ag.covariance, [x44]),
        "reshape": (lambda u: ag.reshape(u, (2, -1)), [x44]), "transpose": (ag.transpose, [x44]),
        "getitem": (lambda u: ag.getitem(u, (slice(1, 3), [0, 2, 2])), [x44]),
        "concat": (lambda u, v: ag.concat([u, v], axis=1), [a, b]),
        "gather_rows": (lambda u: ag.gather_rows(u, idx), [rng.standard_normal((2, 5, 3))]),
        "scatter_rows": (lambda u: ag.scatter_rows(u, idx, 6, valid), [rng.standard_normal((2, 3, 2))]),
        "matmul": (lambda u, v: ag.matmul(u, ag.transpose(v)), [a, b]),
        "softmax": (lambda u: ag.softmax(u, mask=np.array([True, False, True, True])), [x44]),
        "layer_norm": (ag.layer_norm, [rng.standard_normal((3, 5, 6)), rng.standard_normal(6),
                                       rng.standard_normal(6)]),
        "smooth_l1": (lambda u, v: ag.smooth_l1(u, v, 0.8), [a, a + np.where(rng.random((3, 4)) < .5, .3, 1.5)]),
        "conv1d": (ag.conv1d, [rng.standard_normal((2, 7, 3)), rng.standard_normal((3, 3, 5)),
                               rng.standard_normal(5)]),
        "maxpool1d": (ag.maxpool1d, [rng.standard_normal((2, 7, 3))]),
        "conv_transpose1d": (ag.conv_transpose1d, [rng.random((2, 3, 4, 4)), rng.standard_normal(2),
                                                   np.array(rng.standard_normal())]),
    }


def _end_to_end_probe(seed=0):
    cfg = ModelConfig(d=8, heads=2, ff_hidden=16, max_len=64)
    model = HierJEPAModel(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    table = EmbeddingTable(np.stack([np.arange(40), np.zeros(40)], 1), rng.standard_normal((40, 8)))
    for enc in model.ctx[1:]:
        enc.sigma.data[...] = 0.4  # exercise the injection path
    rows = [rng.integers(0, 40, 19), rng.integers(0, 40, 13)]
    stack_fn = lambda: model.abstractions(batch_from_rows(rows, table))
    plans = model.sample_plans(stack_fn(), seed, 0)

    def total():
        loss, _, _ = model.loss(stack_fn(), plans)
        return loss

    params = model.trainable()
    for _, p in params:
        p.grad = None
    total().backward()
    picks = rng.choice(len(params), 10, replace=False)
    analytic, numeric, names = [], [], []
    for k in picks:
        name, p = params[k]
        flat = int(rng.integers(p.data.size))
        idx = np.unravel_index(flat, p.shape)
        g = ag.numerical_grad(total, p, eps=1e-6, indices=[idx])
        analytic.append(0.0 if p.grad is None else p.grad[idx])
        numeric.append(g[idx])
        names.append(name)
    return ag.relative_error(np.array(analytic), np.array(numeric)), names


def test_criterion_01_autodiff_integrity(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    errs = {name: ag.gradcheck(fn, [P(x) for x in xs]) for name, (fn, xs) in _op_cases(rng).items()}
    worst_op = max(errs, key=errs.get)
    probe, names = _end_to_end_probe()
    elapsed = time.perf_counter() - t0
    ok = errs[worst_op] <= 1e-6 and probe <= 1e-4 and elapsed < 60
    verdict(capsys, 1, ok, f"{len(errs)} ops, worst {worst_op}={errs[worst_op]:.2e}; "
                           f"10-parameter probe {probe:.2e}; {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. shape chain
# ---------------------------------------------------------------------------

def test_criterion_02_shape_chain(capsys):
    bad = []
    rng = np.random.default_rng(2)
    for d in (8, 16):
        params = ConvStageParams(d, rng)
        table = EmbeddingTable(np.stack([np.arange(10), np.zeros(10)], 1), rng.standard_normal((10, d)))
        rows = [rng.integers(0, 10, n) for n in range(4, 257)]
        # batched (with padding) and one trajectory at a time
        batched = build_abstractions(batch_from_rows(rows, table), params)
        for i, n in enumerate(range(4, 257)):
            want = (n, n // 2, (n // 2) // 2)
            got_b = tuple(int(m[i].sum()) for m in batched.level_masks)
            single = build_abstractions(batch_from_rows([rows[i]], table), params)
            got_s = tuple(t.shape[1] for t in single.levels)
            widths = tuple(t.shape[2] for t in single.levels)
            if got_b != want or got_s != want or widths != (d, 2 * d, 4 * d):
                bad.append((d, n, got_b, got_s, widths))
    verdict(capsys, 2, not bad, f"506 (n, d) cases, {len(bad)} mismatches {bad[:2]}")


# ---------------------------------------------------------------------------
# 3. masking contract
# ---------------------------------------------------------------------------

def test_criterion_03_masking_contract(capsys):
    rng = np.random.default_rng(3)
    ratios = (0.10, 0.15, 0.20, 0.25, 0.30)
    violations, plans = [], 0
    while plans < 10_000:
        lengths = rng.integers(4, 257, 16)
        plan = plan_level(lengths, ratios, 4, 0.5, (0.85, 1.0), rng)
        for n, tg, ctx in zip(lengths, plan.targets, plan.context):
            covered = np.zeros(n, bool)
            for m in tg:
                if len(m.indices) != max(1, int(np.floor(m.ratio * n + 0.5))):
                    violations.append(("size", n, m.ratio, len(m.indices)))
                if m.successive and np.any(np.diff(m.indices) != 1):
                    violations.append(("contiguity", n))
                if m.indices.min() < 0 or m.indices.max() >= n:
                    violations.append(("pad", n))
                covered[m.indices[m.indices < n]] = True
            if len(ctx) == 0 or ctx.max() >= n or covered[ctx].any():
                violations.append(("context", n))
            plans += 1
    verdict(capsys, 3, not violations, f"{plans} plans, {len(violations)} violations {violations[:3]}")


# ---------------------------------------------------------------------------
# 4. attention propagation
# ---------------------------------------------------------------------------

def test_criterion_04_attention_propagation(capsys):
    rng = np.random.default_rng(4)
    problems = []
    model = HierJEPAModel(ModelConfig(d=8, heads=2, ff_hidden=16, max_len=64), seed=0)
    for trial in range(50):
        enc = model.ctx[1 + trial % 2]
        enc.deconv_w.data[...] = rng.standard_normal(2) * 3
        enc.deconv_b.data[...] = rng.standard_normal()
        n = int(rng.integers(2, 30))
        amap = Tensor(rng.dirichlet(np.ones(n), size=(2, n)))
        full = ag.conv_transpose1d(amap, enc.deconv_w, enc.deconv_b)
        if full.shape != (2, 2 * n, 2 * n):
            problems.append(("deconv shape", n))
        for squash in ("clamp", "sigmoid"):
            for n_lower in (2 * n, 2 * n + 1, 2 * n - 1):
                out = propagate_attention(amap, enc, n_lower, squash).data
                if out.shape != (2, n_lower, n_lower):
                    problems.append(("fit", n, n_lower))
                if out.min() < 0 or out.max() > 1:
                    problems.append(("range", squash))
                k = min(n_lower, 2 * n)
                ref = np.clip(full.data, 0, 1) if squash == "clamp" else 1 / (1 + np.exp(-full.data))
                tol = 0.0 if squash == "clamp" else 1e-15
                if not np.allclose(out[:, :k, :k], ref[:, :k, :k], rtol=0, atol=tol):
                    problems.append(("truncate", n, n_lower))

    # sigma = 0 against interaction = none, on the full model
    table = EmbeddingTable(np.stack([np.arange(40), np.zeros(40)], 1), rng.standard_normal((40, 8)))
    batch = batch_from_rows([rng.integers(0, 40, k) for k in (23, 9, 16)], table)
    a = HierJEPAModel(ModelConfig(d=8, heads=2, ff_hidden=16, max_len=64), seed=5)
    b = HierJEPAModel(ModelConfig(d=8, heads=2, ff_hidden=16, max_len=64, interaction="none"), seed=5)
    for enc in a.ctx[1:]:
        enc.sigma.data[...] = 0.0
    if not np.array_equal(a.infer(batch), b.infer(batch)):
        problems.append(("sigma0", None))

    worst = 0.0
    for trial in range(50):
        mha = MultiHeadAttention(8, 2, rng)
        L = int(rng.integers(2, 12))
        x = Tensor(rng.standard_normal((3, L, 8)))
        mask = np.ones((3, L), bool)
        mask[1, L // 2 + 1 :] = False
        _, fused = mha(x, x, mask, Tensor(rng.random((3, L, L))), Parameter(np.array(rng.uniform(0.01, 3.0))))
        worst = max(worst, float(np.abs(fused.data.sum(-1) - 1).max()))
    if worst > 1e-9:
        problems.append(("renorm", worst))
    verdict(capsys, 4, not problems, f"range/shape/truncation/sigma0 checks, renorm row error {worst:.1e}; "
                                     f"problems {problems[:3]}")


# ---------------------------------------------------------------------------
# 5. EMA and freezing
# ---------------------------------------------------------------------------

def test_criterion_05_ema_and_freeze(capsys):
    trajs = synth_generate(100, SynthRegion(width_m=2000, height_m=2000, min_len=20, max_len=40), seed=5)
    est = HierJEPA(d=8, heads=2, ff_hidden=16, epochs=4, batch_size=4, max_len=40, edge_len_m=100.0,
                   walks_per_node=2, walk_len=10, walk_epochs=1)
    leaks, steps, moved = [], [0], []
    tgt_before = None

    def on_step(e, step, report):
        nonlocal tgt_before
        steps[0] += 1
        for name, p in e.model_.target_parameters():
            if p.grad is not None and np.any(p.grad):
                leaks.append((step, name))
        snap = np.concatenate([p.data.ravel() for _, p in e.model_.target_parameters()])
        if tgt_before is not None:
            moved.append(not np.array_equal(snap, tgt_before))
        tgt_before = snap

    est.fit(trajs, on_step=on_step)

    # geometric contraction towards a fixed online network
    model = HierJEPAModel(ModelConfig(d=8, heads=2, ff_hidden=16, max_len=64), seed=1)
    tgt, ctx = ema_pairs(model)
    rng = np.random.default_rng(5)
    for _, p in tgt:
        p.data += rng.standard_normal(p.shape)
    theta = np.concatenate([p.data.ravel() for _, p in ctx])
    d0 = np.linalg.norm(np.concatenate([p.data.ravel() for _, p in tgt]) - theta)
    worst = 0.0
    for k in range(1, 201):
        ema_update(tgt, ctx, 0.996)
        dk = np.linalg.norm(np.concatenate([p.data.ravel() for _, p in tgt]) - theta)
        worst = max(worst, abs(dk - 0.996**k * d0))
    ok = steps[0] == 100 and not leaks and all(moved) and worst <= 1e-12
    verdict(capsys, 5, ok, f"{steps[0]} steps, {len(leaks)} target gradients, target moved every step "
                           f"{all(moved)}; contraction error {worst:.1e} (d0={d0:.2f})")


# ---------------------------------------------------------------------------
# 6. measure oracles
# ---------------------------------------------------------------------------

def test_criterion_06_measure_oracles(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    mism = []
    for i in range(1000):
        a, b = random_pair(rng)
        eps = float(rng.uniform(1.0, 6.0))
        if edr(a, b, eps) != edr_rec(a, b, eps):
            mism.append(("edr", i))
        if lcss_length(a, b, eps) != lcss_rec(a, b, eps):
            mism.append(("lcss", i))
        if hausdorff(a, b) != hausdorff_brute(a, b):
            mism.append(("hausdorff", i))
        if discrete_frechet(a, b) != frechet_rec(a, b):
            mism.append(("frechet", i))
    order_bad = 0
    for _ in range(10_000):
        a, b = random_pair(rng, max_len=20)
        order_bad += discrete_frechet(a, b) < hausdorff(a, b)
    elapsed = time.perf_counter() - t0
    ok = not mism and order_bad == 0 and elapsed < 120
    verdict(capsys, 6, ok, f"1000 pairs x 4 measures, {len(mism)} mismatches; frechet<hausdorff "
                           f"{order_bad}/10000; {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 7-9. desk-scale training run and ablations
# ---------------------------------------------------------------------------

class RandomEncoder:
    """i.i.d. Gaussian embedding per call: the chance-level reference."""

    def __init__(self, d, seed):
        self.rng = np.random.default_rng(seed)
        self.d = d

    def transform(self, X):
        return self.rng.standard_normal((len(X), self.d))


@pytest.fixture(scope="module")
def desk():
    cfg = PROFILES["desk"]
    region = SynthRegion(cfg.synth_center_lon, cfg.synth_center_lat, cfg.synth_width_m, cfg.synth_height_m,
                         min_len=cfg.min_len, max_len=cfg.max_len, min_step_m=cfg.synth_min_step_m,
                         max_step_m=cfg.synth_max_step_m)
    t0 = time.perf_counter()
    train = synth_generate(cfg.synth_count, region, cfg.seed)
    test = synth_generate(cfg.synth_test_count, region, cfg.seed + 1)
    spec = grid_spec_for(train + test, cfg.edge_len_m)
    params = cfg.estimator_params()
    table = HierJEPA(**params).cell_embedder().fit(build_region_graph(train + test, spec)).table_
    sim = SelfSimConfig(query_count=cfg.query_count, db_size=cfg.db_size, db_fractions=(1.0,),
                        rho_s_grid=(0.0,), rho_d_grid=(0.0,), distort_std_m=cfg.distort_std_m, seed=cfg.seed)
    queries, pool = test[: cfg.query_count], test[cfg.query_count :]

    def run(**overrides):
        start = time.perf_counter()
        est = HierJEPA(**{**params, **overrides}).initialize(table, spec).continue_fit(train)
        rep = self_similarity(est, queries, pool, sim, spec, variants=("db_size",))
        return dict(est=est, rank=rep.get("db_size", 1.0).mean_rank, seconds=time.perf_counter() - start)

    out = {"main": run()}
    out["main"]["total_seconds"] = time.perf_counter() - t0
    out["no_attn"] = run(interaction="none")
    out["single"] = run(levels=1)
    out["emb"] = run(interaction="embed_concat")
    rand = self_similarity(RandomEncoder(cfg.d, 0), queries, pool, sim, spec, variants=("db_size",))
    out["random_rank"] = rand.get("db_size", 1.0).mean_rank
    out.update(cfg=cfg, test=test)
    return out


def _collapse(est, test):
    z = est.transform(test)
    std = z.std(axis=0)
    return float(np.mean(std >= 0.1)), std


@pytest.mark.slow
def test_criterion_07_desk_training_efficacy(capsys, desk):
    main, D = desk["main"], desk["cfg"].db_size
    rand = desk["random_rank"]
    ok = main["rank"] <= 0.05 * D and abs(rand - (D + 1) / 2) <= 0.1 * (D + 1) / 2 \
        and main["total_seconds"] <= 15 * 60
    verdict(capsys, 7, ok, f"mean rank {main['rank']:.3f} at |D|={D} (limit {0.05 * D:.0f}); random "
                           f"{rand:.1f} vs {(D + 1) / 2}; {main['total_seconds']:.0f}s end to end")


@pytest.mark.slow
def test_criterion_08_non_collapse(capsys, desk):
    est = desk["main"]["est"]
    frac, std = _collapse(est, desk["test"])
    v1, vn = est.history_[0]["var"], est.history_[-1]["var"]
    emb_frac, _ = _collapse(desk["emb"]["est"], desk["test"])
    ok = frac >= 0.9 and vn < v1
    verdict(capsys, 8, ok, f"{frac:.0%} of dims with std >= 0.1 (min {std.min():.3f}); var loss "
                           f"{v1:.4f} -> {vn:.4f}; embed_concat ablation {emb_frac:.0%} of dims >= 0.1")


@pytest.mark.slow
def test_criterion_09_ablation_direction(capsys, desk):
    full, na, sl, emb = (desk[k]["rank"] for k in ("main", "no_attn", "single", "emb"))
    ok = full <= na and full <= sl
    verdict(capsys, 9, ok, f"mean rank full {full:.3f}, no attention {na:.3f}, single level {sl:.3f}, "
                           f"embed_concat {emb:.3f} (reported only)")


# ---------------------------------------------------------------------------
# 10. fine-tuning harness
# ---------------------------------------------------------------------------

class OffsetEncoder:
    """Embeds trajectory ``t{i}`` as (offset_i, 0, 0, 0)."""

    def __init__(self, offsets):
        self.offsets = np.asarray(offsets, dtype=np.float64)

    def transform(self, X):
        z = np.zeros((len(X), 4))
        z[:, 0] = self.offsets[[int(t.id[1:]) for t in X]]
        return z

    def state_bytes(self):
        return self.offsets.tobytes()


def test_criterion_10_finetune_harness(capsys):
    rng = np.random.default_rng(10)
    spec = SynthRegion(width_m=3000, height_m=3000).grid_spec(25.0)
    offsets = rng.uniform(0, 10.0, 1000)
    ys = np.arange(20) * 5.0
    xy = [np.stack([np.full(20, dx), ys], axis=1) for dx in offsets]
    trajs = [Trajectory(f"t{i}", np.stack(spec.unproject(p[:, 0], p[:, 1]), axis=1)) for i, p in enumerate(xy)]
    enc = OffsetEncoder(offsets)
    # the oracle property itself: embedding distance equals the Hausdorff distance
    z = enc.transform(trajs[:30])
    gap = max(abs(np.linalg.norm(z[i] - z[j]) - hausdorff(xy[i], xy[j])) for i in range(30) for j in range(30))
    before = enc.state_bytes()
    res = finetune_decoder(enc, trajs, MeasureConfig("hausdorff"), spec, epochs=50, seed=0, xy=xy)
    same = enc.state_bytes() == before
    ok = gap < 1e-9 and res.metrics["hr5"] >= 0.95 and same
    verdict(capsys, 10, ok, f"HR@5 {res.metrics['hr5']:.3f} HR@20 {res.metrics['hr20']:.3f} "
                            f"R5@20 {res.metrics['r5_20']:.3f} on 200 test trajectories; oracle gap "
                            f"{gap:.1e}; encoder bytes unchanged {same}")


# ---------------------------------------------------------------------------
# 11. determinism
# ---------------------------------------------------------------------------

SMALL = ["--d", "8", "--heads", "2", "--ff-hidden", "16", "--batch-size", "16", "--min-len", "20",
         "--max-len", "40", "--walks-per-node", "2", "--walk-len", "10", "--walk-epochs", "1",
         "--synth-width-m", "2000", "--synth-height-m", "2000", "--synth-count", "150",
         "--synth-test-count", "150", "--epochs", "2", "--query-count", "20", "--db-size", "100",
         "--finetune-epochs", "3"]


def _pipeline(root: Path) -> dict[str, str]:
    r = str(root)
    steps = [
        ["synth"],
        ["pretrain-cells", "--data", f"{r}/train.csv", "--extra-data", f"{r}/test.csv"],
        ["train", "--data", f"{r}/train.csv", "--table", f"{r}/cells.hxem"],
        ["eval-selfsim", "--checkpoint", f"{r}/model.ckpt", "--data", f"{r}/test.csv"],
        ["finetune", "--checkpoint", f"{r}/model.ckpt", "--data", f"{r}/test.csv", "--measure", "hausdorff",
         "lcss"],
        ["measure", "--data", f"{r}/test.csv", "--kind", "frechet", "--limit", "25"],
    ]
    for argv in steps:
        assert cli_main([*argv, "--run-dir", r, *SMALL]) == 0, argv
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_11_determinism(capsys, tmp_path):
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b")
    differ = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    needed = {"model.ckpt", "checkpoints/epoch_002.ckpt", "reports/selfsim.csv", "reports/finetune.csv",
              "frechet.tsim", "cells.hxem"}
    ok = not differ and needed <= a.keys()
    verdict(capsys, 11, ok, f"{len(a)} files from two identical pipelines, {len(differ)} differ {differ[:3]}")
