import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hierjepa.data import (
    DataError, LengthError, SynthRegion, Trajectory, batch_from_rows, distort, downsample, embed_batch,
    load_csv, odd_even_split, synth_generate, write_csv,
)
from hierjepa.hexgrid import HexGridSpec
from hierjepa.region_embed import EmbeddingTable
from hierjepa.validation import check_trajectories, grid_spec_for

REGION = SynthRegion(width_m=3000, height_m=3000, min_len=20, max_len=40)
SPEC = REGION.grid_spec(50.0)


def test_synth_is_deterministic_and_in_bounds():
    a = synth_generate(30, REGION, seed=7)
    b = synth_generate(30, REGION, seed=7)
    c = synth_generate(30, REGION, seed=8)
    assert all(np.array_equal(x.points, y.points) for x, y in zip(a, b))
    assert not np.array_equal(a[0].points, c[0].points)
    for t in a:
        assert 20 <= len(t) <= 40
        assert SPEC.in_bounds(t.points[:, 0], t.points[:, 1]).all()
        x, y = SPEC.project(t.points[:, 0], t.points[:, 1])
        steps = np.hypot(np.diff(x), np.diff(y))
        assert steps.max() <= REGION.max_step_m + 1e-6


def test_csv_roundtrip(tmp_path):
    trajs = synth_generate(5, REGION, seed=1)
    path = tmp_path / "d.csv"
    write_csv(trajs, path)
    back = load_csv(path, SPEC, min_len=20, max_len=40)
    assert [t.id for t in back] == [t.id for t in trajs]
    for x, y in zip(trajs, back):
        np.testing.assert_array_equal(x.points, y.points)


def test_csv_sorts_by_seq_and_filters(tmp_path, caplog):
    path = tmp_path / "d.csv"
    rows = ["traj_id,seq,lon,lat,t"]
    rows += [f"a,{i},{-8.61 + 1e-4 * i},41.15,{i}" for i in reversed(range(5))]
    rows += ["b,0,-8.61,41.15,0", "b,1,-8.60,41.15,1"]
    rows += ["c,0,50.0,50.0,0"] + [f"c,{i},-8.61,41.15,{i}" for i in range(1, 5)]
    path.write_text("\n".join(rows) + "\n")
    trajs = load_csv(path, SPEC, min_len=4, max_len=10)
    assert [t.id for t in trajs] == ["a", "c"]
    assert np.all(np.diff(trajs[0].points[:, 0]) > 0)
    assert len(trajs[1]) == 4  # out-of-box point dropped
    np.testing.assert_array_equal(trajs[0].timestamps, np.arange(5))


def test_csv_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_csv(tmp_path / "missing.csv", SPEC)
    bad = tmp_path / "bad.csv"
    bad.write_text("traj_id,seq,lon,lat\na,0,-8.61,41.15\na,1,oops,41.15\n")
    with pytest.raises(DataError, match=":3:"):
        load_csv(bad, SPEC, min_len=1)
    hdr = tmp_path / "hdr.csv"
    hdr.write_text("id,x,y\n")
    with pytest.raises(DataError, match="header"):
        load_csv(hdr, SPEC)
    short = tmp_path / "short.csv"
    short.write_text("traj_id,seq,lon,lat\na,0,-8.61,41.15\n")
    with pytest.raises(DataError, match="no trajectories"):
        load_csv(short, SPEC)


def test_trajectory_timestamp_checks():
    with pytest.raises(DataError):
        Trajectory("x", np.zeros((3, 2)), np.array([0.0, 2.0, 1.0]))
    with pytest.raises(DataError):
        Trajectory("x", np.zeros((3, 2)), np.array([0.0, 1.0]))


@given(st.integers(4, 60))
def test_odd_even_split_partitions(n):
    t = Trajectory("q", np.stack([np.arange(n), np.zeros(n)], axis=1) * 1e-5, np.arange(n, dtype=float))
    a, b = odd_even_split(t)
    assert len(a) == (n + 1) // 2 and len(b) == n // 2
    merged = np.empty((n, 2))
    merged[0::2], merged[1::2] = a.points, b.points
    np.testing.assert_array_equal(merged, t.points)


def test_odd_even_split_needs_four_points():
    with pytest.raises(LengthError):
        odd_even_split(Trajectory("q", np.zeros((3, 2))))


def test_downsample_statistics_and_endpoints():
    t = synth_generate(1, SynthRegion(min_len=200, max_len=200), seed=0)[0]
    kept = []
    for s in range(200):
        d = downsample(t, 0.3, s)
        np.testing.assert_array_equal(d.points[[0, -1]], t.points[[0, -1]])
        kept.append(len(d) - 2)
    # interior points survive with probability 0.7 (binomial mean)
    assert abs(np.mean(kept) / 198 - 0.7) < 0.01
    assert downsample(t, 0.0, 1) is t
    with pytest.raises(ValueError):
        downsample(t, 0.95, 0)


def test_distort_moves_expected_fraction():
    t = synth_generate(1, SynthRegion(min_len=200, max_len=200), seed=0)[0]
    spec = SynthRegion().grid_spec(25.0)
    moved, shifts = [], []
    for s in range(100):
        d = distort(t, 0.4, s, spec, std_m=7.5)
        x0, y0 = spec.project(t.points[:, 0], t.points[:, 1])
        x1, y1 = spec.project(d.points[:, 0], d.points[:, 1])
        delta = np.hypot(x1 - x0, y1 - y0)
        moved.append(np.mean(delta > 0))
        shifts.extend(np.stack([x1 - x0, y1 - y0], 1)[delta > 0].ravel())
    assert abs(np.mean(moved) - 0.4) < 0.02
    assert abs(np.std(shifts) - 7.5) < 0.3
    assert distort(t, 0.0, 0, spec, 7.5) is t


def test_batching_pads_with_zero_rows(rng):
    table = EmbeddingTable(np.array([[0, 0], [1, 0], [2, 0]]), rng.standard_normal((3, 4)))
    batch = batch_from_rows([np.array([0, 1, 2]), np.array([2])], table)
    assert batch.embeddings.shape == (2, 3, 4)
    np.testing.assert_array_equal(batch.pad_mask, [[1, 1, 1], [1, 0, 0]])
    assert not batch.embeddings[1, 1:].any()
    np.testing.assert_array_equal(batch.unbatch()[1], table.vectors[[2]])


def test_embed_batch_uses_cells():
    spec = HexGridSpec(0.0, 0.0, 100.0, -1, -1, 1, 1)
    table = EmbeddingTable(np.array([[0, 0]]), np.ones((1, 3)))
    t = Trajectory("a", np.zeros((4, 2)))
    assert embed_batch([t], table, spec).embeddings.sum() == 12


def test_validation_helpers():
    out = check_trajectories([np.zeros((5, 2))], min_len=4)
    assert out[0].id == "0"
    with pytest.raises(LengthError):
        check_trajectories([np.zeros((3, 2))], min_len=4)
    with pytest.raises(ValueError):
        check_trajectories([np.full((5, 2), np.nan)])
    with pytest.raises(ValueError):
        check_trajectories([])
    trajs = synth_generate(3, REGION, seed=0)
    spec = grid_spec_for(trajs, 25.0)
    for t in trajs:
        assert spec.in_bounds(t.points[:, 0], t.points[:, 1]).all()
