import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.distance import directed_hausdorff

from hierjepa.measures import (
    MeasureConfig, discrete_frechet, edr, hausdorff, lcss_dist, lcss_length, load_matrix, measure,
    neighbor_lists, pairwise_matrix, save_matrix, save_neighbors_csv,
)
from oracles import edr_rec, frechet_couplings, frechet_rec, hausdorff_brute, lcss_rec, random_pair

traj = st.integers(1, 7).flatmap(
    lambda n: arrays(np.float64, (n, 2), elements=st.floats(-20, 20, allow_nan=False)))


def test_against_recursive_oracles(rng):
    for _ in range(300):
        a, b = random_pair(rng)
        eps = float(rng.uniform(0.5, 4))
        assert edr(a, b, eps) == edr_rec(a, b, eps)
        assert lcss_length(a, b, eps) == lcss_rec(a, b, eps)
        assert discrete_frechet(a, b) == pytest.approx(frechet_rec(a, b), abs=1e-12)
        assert hausdorff(a, b) == pytest.approx(hausdorff_brute(a, b), abs=1e-12)


def test_frechet_equals_coupling_enumeration(rng):
    for _ in range(100):
        a, b = random_pair(rng, max_len=5)
        assert discrete_frechet(a, b) == pytest.approx(frechet_couplings(a, b), abs=1e-12)


def test_hausdorff_matches_scipy(rng):
    a, b = rng.standard_normal((40, 2)), rng.standard_normal((25, 2))
    ref = max(directed_hausdorff(a, b)[0], directed_hausdorff(b, a)[0])
    assert hausdorff(a, b) == pytest.approx(ref, abs=1e-12)


def test_known_values():
    a = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    b = np.array([[0.0, 1.0], [1.0, 1.0], [2.0, 1.0]])
    assert discrete_frechet(a, b) == 1.0
    assert hausdorff(a, b) == 1.0
    assert edr(a, b, 0.5) == 3 and edr(a, b, 1.0) == 0
    assert lcss_dist(a, b, 1.0) == 0.0 and lcss_dist(a, b, 0.5) == 1.0
    # reversing a path keeps Hausdorff but not Frechet
    assert hausdorff(a, a[::-1]) == 0.0
    assert discrete_frechet(a, a[::-1]) == 2.0


@given(traj, traj)
def test_metric_properties(a, b):
    assert discrete_frechet(a, b) >= hausdorff(a, b) - 1e-12
    assert discrete_frechet(a, b) == pytest.approx(discrete_frechet(b, a))
    assert hausdorff(a, a) == 0.0 and discrete_frechet(a, a) == 0.0
    assert edr(a, b, 1.0) == edr(b, a, 1.0)
    assert abs(len(a) - len(b)) <= edr(a, b, 1.0) <= max(len(a), len(b))
    assert 0.0 <= lcss_dist(a, b, 1.0) <= 1.0


def test_config_validation():
    with pytest.raises(ValueError):
        MeasureConfig("dtw")
    with pytest.raises(ValueError):
        MeasureConfig("edr")
    with pytest.raises(ValueError):
        edr(np.zeros((0, 2)), np.zeros((1, 2)), 1.0)


def test_pairwise_matrix_and_io(tmp_path, rng):
    trajs = [rng.uniform(0, 10, (rng.integers(2, 9), 2)) for _ in range(10)]
    cfg = MeasureConfig("frechet")
    mat = pairwise_matrix(trajs, cfg)
    assert mat.shape == (10, 10)
    np.testing.assert_array_equal(mat, mat.T)
    assert not np.diag(mat).any()
    assert mat[2, 5] == measure(trajs[2], trajs[5], cfg)
    np.testing.assert_array_equal(pairwise_matrix(trajs, cfg, workers=3), mat)
    save_matrix(mat, tmp_path / "m.tsim", "frechet")
    back, kind = load_matrix(tmp_path / "m.tsim")
    np.testing.assert_array_equal(back, mat)
    assert kind == "frechet"
    neigh = neighbor_lists(mat, k=3)
    for i in range(10):
        assert i not in neigh[i]
        assert list(mat[i, neigh[i]]) == sorted(mat[i, neigh[i]])
    save_neighbors_csv(neigh, mat, tmp_path / "n.csv")
    assert len((tmp_path / "n.csv").read_text().splitlines()) == 31


def test_neighbor_ties_break_by_index():
    mat = np.array([[0, 1, 1, 1], [1, 0, 2, 2], [1, 2, 0, 3], [1, 2, 3, 0]], dtype=float)
    assert neighbor_lists(mat)[0].tolist() == [1, 2, 3]
