import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from graphtta import autodiff as ad
from graphtta.graph import (
    GraphError,
    SensorGraph,
    gaussian_kernel_adjacency,
    gcn_normalize,
    load_adjacency_csv,
    load_coords_csv,
    save_adjacency_csv,
    save_coords_csv,
    select_virtual,
    select_virtual_random,
    select_virtual_regional,
    virtual_incident_edges,
)

from _util import random_graph


def brute_normalize(a):
    n = len(a)
    a_hat = a + np.eye(n)
    d = a_hat.sum(axis=1)
    out = np.zeros_like(a_hat)
    for i in range(n):
        for j in range(n):
            out[i, j] = a_hat[i, j] / np.sqrt(d[i] * d[j])
    return out


# gcn_normalize


def test_normalize_single_node():
    np.testing.assert_array_equal(gcn_normalize(np.zeros((1, 1))), [[1.0]])


def test_normalize_two_nodes():
    np.testing.assert_allclose(gcn_normalize(np.array([[0.0, 1.0], [1.0, 0.0]])), [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)


@settings(max_examples=60)
@given(
    st.integers(1, 10).flatmap(
        lambda n: arrays(np.float64, (n, n), elements=st.floats(0, 3, allow_nan=False))
    )
)
def test_normalize_matches_brute_force(a):
    np.fill_diagonal(a, 0.0)
    np.testing.assert_allclose(gcn_normalize(a), brute_normalize(a), rtol=0, atol=1e-12)


@settings(max_examples=40)
@given(st.integers(1, 8).flatmap(lambda n: arrays(np.float64, (n, n), elements=st.floats(0, 3))))
def test_normalize_preserves_symmetry(a):
    a = a + a.T
    out = gcn_normalize(a)
    np.testing.assert_allclose(out, out.T, atol=1e-15)
    assert np.all(np.isfinite(out))


def test_normalize_tensor_matches_array_and_differentiates():
    rng = np.random.default_rng(0)
    p = ad.ParamSet.from_arrays({"a": rng.uniform(0, 1, size=(5, 5))})
    np.testing.assert_allclose(gcn_normalize(p["a"]).data, gcn_normalize(p["a"].data), atol=1e-15)
    w = rng.normal(size=(5, 5))
    f = lambda: ad.tsum(gcn_normalize(p["a"]) * w)
    g = ad.backward(f(), p)
    num = ad.numerical_grad(lambda: f().item(), p["a"].data)
    np.testing.assert_allclose(g["a"], num, atol=1e-8)


def test_normalize_rejects_negative():
    with pytest.raises(GraphError):
        gcn_normalize(np.array([[0.0, -1.0], [-1.0, 0.0]]))


# gaussian kernel


def test_kernel_coincident_points():
    w = gaussian_kernel_adjacency([[0.3, 0.3], [0.3, 0.3]], sigma=0.1)
    assert w[0, 1] == 1.0 and w[0, 0] == 0.0


def test_kernel_at_sigma_distance():
    w = gaussian_kernel_adjacency([[0.0, 0.0], [0.5, 0.0]], sigma=0.5, threshold=0.1)
    assert w[0, 1] == pytest.approx(np.exp(-1.0), abs=1e-12)


def test_kernel_high_threshold_empty():
    w = gaussian_kernel_adjacency([[0, 0], [1, 0], [0, 1]], sigma=0.2, threshold=0.99)
    assert not w.any()


def test_kernel_is_symmetric_and_validates():
    c = np.random.default_rng(1).uniform(size=(12, 2))
    w = gaussian_kernel_adjacency(c, 0.3, 0.05)
    np.testing.assert_array_equal(w, w.T)
    with pytest.raises(GraphError):
        gaussian_kernel_adjacency(c, 0.0)
    with pytest.raises(GraphError):
        gaussian_kernel_adjacency(c, 0.3, 1.0)


# SensorGraph


def test_graph_invariants():
    a = np.array([[5.0, 1.0, 0.0], [0.0, 0.0, 2.0], [0.0, 0.0, 0.0]])
    g = SensorGraph(a, [True, False, False])
    assert g.adjacency[0, 0] == 0.0
    assert g.n_virtual == 1 and g.n_observed == 2
    # neighbours on undirected support: 0->1 forward edge only
    assert g.virtual_neighbors(0).tolist() == [1]
    with pytest.raises(GraphError):
        SensorGraph(a, [True, True, True])
    with pytest.raises(GraphError):
        SensorGraph(-a, [False, False, False])
    with pytest.raises(ValueError):
        g.adjacency[0, 1] = 3.0


# selections


def test_random_selection_cardinality_and_determinism():
    s = select_virtual_random(10, 0.5, seed=3)
    assert len(s.selected) == 5 and len(set(s.selected)) == 5
    assert select_virtual_random(10, 0.5, seed=3) == s


def test_random_selection_is_uniform_over_seeds():
    counts = np.zeros(10)
    for seed in range(1000):
        counts[list(select_virtual_random(10, 0.5, seed).selected)] += 1
    assert np.all(np.abs(counts - 500) <= 50), counts


@pytest.mark.parametrize("ratio", [0.95, 0.0, 1.0])
def test_selection_rejects_bad_ratio(ratio):
    with pytest.raises(GraphError):
        select_virtual_random(10, ratio, 0)


def test_regional_covers_nearest_nodes():
    rng = np.random.default_rng(0)
    coords = rng.uniform(size=(30, 2))
    s = select_virtual_regional(coords, 0.3, seed=5)
    assert len(s.selected) == 9
    sel = np.array(s.selected)
    # whichever node seeded the region, the set must be the 9 nearest to some member
    found = False
    for c in sel:
        d = np.linalg.norm(coords - coords[c], axis=1)
        if set(np.argsort(d, kind="stable")[:9].tolist()) == set(sel.tolist()):
            found = True
    assert found


def test_regional_two_clusters():
    rng = np.random.default_rng(2)
    a = rng.normal(0.0, 0.05, size=(10, 2))
    b = rng.normal(5.0, 0.05, size=(10, 2))
    coords = np.vstack([a, b])
    for seed in range(20):
        s = select_virtual_regional(coords, 0.5, seed)
        sel = set(s.selected)
        assert sel == set(range(10)) or sel == set(range(10, 20))


def test_regional_determinism_and_missing_coords():
    coords = np.random.default_rng(1).uniform(size=(15, 2))
    assert select_virtual_regional(coords, 0.4, 7) == select_virtual_regional(coords, 0.4, 7)
    with pytest.raises(GraphError):
        select_virtual("regional", 15, 0.4, 7, coords=None)
    with pytest.raises(GraphError):
        select_virtual("spiral", 15, 0.4, 7)


# virtual incident edges


def test_incident_edges_empty_without_virtual():
    g = random_graph(8, 0)
    assert virtual_incident_edges(g) == []


def test_incident_edges_star():
    a = np.zeros((5, 5))
    a[0, 1:] = a[1:, 0] = 1.0
    g = SensorGraph(a, [True, False, False, False, False])
    assert sorted(virtual_incident_edges(g)) == [(0, 1), (0, 2), (0, 3), (0, 4)]


@pytest.mark.parametrize("seed", range(5))
def test_incident_edges_brute_force(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(20, 20)) * (rng.random((20, 20)) < 0.2)
    mask = rng.random(20) < 0.4
    mask[0] = False
    g = SensorGraph(a, mask)
    expected = {(u, v) for u in range(20) for v in range(20) if mask[u] and u != v and (a[u, v] > 0 or a[v, u] > 0)}
    got = virtual_incident_edges(g)
    assert len(got) == len(set(got))
    assert set(got) == expected
    assert all(mask[u] for u, _ in got)
    assert len(got) == sum(len(g.virtual_neighbors(u)) for u in g.virtual_index)


# CSV


def test_adjacency_csv_round_trip(tmp_path):
    a = random_graph(9, 3, seed=4).adjacency
    save_adjacency_csv(a, tmp_path / "a.csv")
    np.testing.assert_array_equal(load_adjacency_csv(tmp_path / "a.csv"), a)


def test_adjacency_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("0,1\n1,x\n")
    with pytest.raises(GraphError, match="row 2, column 2"):
        load_adjacency_csv(p)
    p.write_text("0,1\n1\n")
    with pytest.raises(GraphError, match="row 2"):
        load_adjacency_csv(p)


def test_coords_csv_round_trip(tmp_path):
    c = np.random.default_rng(0).uniform(size=(6, 2))
    save_coords_csv(c, tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "node_id,x,y"
    np.testing.assert_array_equal(load_coords_csv(tmp_path / "c.csv"), c)
