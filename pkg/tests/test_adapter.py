import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphtta import autodiff as ad
from graphtta.adapter import (
    AdjacencyDelta,
    adapt_graph,
    compute_delta,
    init_adapter,
    refine_adjacency,
    score_virtual,
)
from graphtta.autodiff import Tensor
from graphtta.graph import SensorGraph, virtual_incident_edges

from _util import gradient_check, perturb, random_batch, random_graph


def test_init_refiner_output_is_zero():
    p = init_adapter(8, 6, seed=0)
    assert np.all(p["refine_w2"].data == 0) and np.all(p["refine_b2"].data == 0)
    assert all(np.all(np.isfinite(t.data)) for t in p.values())


def test_zero_scorer_gives_half():
    g = random_graph(8, 3, seed=1)
    b = random_batch(g, 4, 6, seed=1)
    p = init_adapter(6, 5, seed=1)
    p["score_w2"].data[...] = 0.0
    _, s = score_virtual(b.readings, b.indicator, g, p)
    np.testing.assert_array_equal(s.data, np.full(3, 0.5))


def test_no_virtual_nodes_gives_empty_scores_and_delta():
    g = random_graph(8, 0)
    b = random_batch(g, 2, 6)
    p = init_adapter(6, 5)
    reps, s = score_virtual(b.readings, b.indicator, g, p)
    assert s.shape == (0,)
    d = compute_delta(reps, g, p)
    assert len(d) == 0
    ref = adapt_graph(b.readings, b.indicator, g, p)
    np.testing.assert_array_equal(ref.adjacency.data, g.adjacency)


@pytest.mark.parametrize("seed", range(4))
def test_scores_in_open_unit_interval(seed):
    g = random_graph(8, 4, seed=seed)
    b = random_batch(g, 3, 6, seed=seed)
    p = perturb(init_adapter(6, 5, seed=seed), 0.5, seed)
    _, s = score_virtual(b.readings, b.indicator, g, p)
    assert s.shape == (4,)
    assert np.all((s.data > 0) & (s.data < 1))


def test_virtual_mean_is_batch_average():
    g = random_graph(7, 3, seed=2)
    b = random_batch(g, 5, 6, seed=2)
    reps, _ = score_virtual(b.readings, b.indicator, g, init_adapter(6, 4, seed=2))
    np.testing.assert_allclose(reps.virtual_mean.data, reps.full.data[:, g.virtual_index].mean(axis=0), atol=1e-15)


def test_zero_refiner_gives_zero_delta_and_identity():
    g = random_graph(10, 4, seed=3)
    b = random_batch(g, 3, 6, seed=3)
    p = init_adapter(6, 5, seed=3)
    ref = adapt_graph(b.readings, b.indicator, g, p)
    assert np.all(ref.delta.values.data == 0)
    assert ref.adjacency.data.tobytes() == g.adjacency.tobytes()


@pytest.mark.parametrize("seed", range(3))
def test_delta_keys_match_incident_edges(seed):
    g = random_graph(12, 5, seed=seed, density=0.3)
    b = random_batch(g, 2, 6, seed=seed)
    p = perturb(init_adapter(6, 4, seed=seed), 0.3, seed)
    reps, _ = score_virtual(b.readings, b.indicator, g, p)
    d = compute_delta(reps, g, p)
    assert sorted(d.as_dict()) == sorted(virtual_incident_edges(g))


def test_delta_uses_endpoint_representations():
    g = random_graph(9, 3, seed=4)
    b = random_batch(g, 2, 6, seed=4)
    p = perturb(init_adapter(6, 4, seed=4), 0.3, 4)
    reps, _ = score_virtual(b.readings, b.indicator, g, p)
    d = compute_delta(reps, g, p)
    r = reps.node_mean.data
    for k, (u, v) in enumerate(zip(d.rows, d.cols)):
        x = np.concatenate([r[u], r[v]])
        h = np.maximum(0, x @ p["refine_w1"].data + p["refine_b1"].data)
        expect = (h @ p["refine_w2"].data + p["refine_b2"].data)[0]
        assert d.values.data[k] == pytest.approx(expect, abs=1e-12)


def _star():
    a = np.zeros((4, 4))
    a[0, 1:] = a[1:, 0] = 0.5
    return SensorGraph(a, [True, False, False, False])


def test_refine_arithmetic():
    g = _star()
    d = AdjacencyDelta(np.array([0, 0, 0]), np.array([1, 2, 3]), Tensor([0.25, 0.0, -1.0]))
    out = refine_adjacency(g, Tensor([0.8]), d).data
    assert out[0, 1] == pytest.approx(0.7)
    assert out[0, 2] == 0.5
    assert out[0, 3] == 0.0  # clamped
    # observed-source entries unchanged, no symmetrization
    np.testing.assert_array_equal(out[1:], g.adjacency[1:])


def test_refine_zero_score_keeps_row():
    g = _star()
    d = AdjacencyDelta(np.array([0, 0, 0]), np.array([1, 2, 3]), Tensor([5.0, -3.0, 2.0]))
    out = refine_adjacency(g, Tensor([0.0]), d).data
    np.testing.assert_array_equal(out, g.adjacency)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 3.0))
def test_locality_and_nonnegativity(seed, scale):
    g = random_graph(10, 4, seed=seed % 97, density=0.4)
    b = random_batch(g, 2, 4, seed=seed)
    p = perturb(init_adapter(4, 4, seed=seed), scale, seed)
    ref = adapt_graph(b.readings, b.indicator, g, p)
    a_hat = ref.adjacency.data
    assert np.all(a_hat >= 0)
    changed = set(zip(*np.nonzero(a_hat != g.adjacency)))
    assert changed <= set(virtual_incident_edges(g))


def test_ablation_switches():
    g = random_graph(8, 3, seed=6)
    b = random_batch(g, 2, 6, seed=6)
    p = perturb(init_adapter(6, 4, seed=6), 0.3, 6)
    ref = adapt_graph(b.readings, b.indicator, g, p, use_scores=False)
    np.testing.assert_array_equal(ref.scores.data, np.ones(3))
    n_edges = len(virtual_incident_edges(g))
    fixed = np.linspace(-0.1, 0.1, n_edges)
    ref = adapt_graph(b.readings, b.indicator, g, p, fixed_delta=fixed)
    np.testing.assert_array_equal(ref.delta.values.data, fixed)
    with pytest.raises(ad.ShapeError):
        adapt_graph(b.readings, b.indicator, g, p, fixed_delta=np.zeros(n_edges + 1))


def test_refined_adjacency_gradient_matches_finite_differences():
    g = random_graph(8, 3, seed=7)
    b = random_batch(g, 2, 4, seed=7)
    p = perturb(init_adapter(4, 4, seed=7), 0.2, 7)
    w = np.random.default_rng(7).normal(size=(8, 8))

    def loss():
        ref = adapt_graph(b.readings, b.indicator, g, p)
        return ad.tsum(ref.normalized() * w)

    errs = gradient_check(loss, p)
    assert max(errs.values()) < 1e-6, errs
