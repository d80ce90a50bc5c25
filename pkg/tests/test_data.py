import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphtta.data import (
    DataError,
    Dataset,
    SplitSpec,
    fit_normalizer,
    generate_synthetic,
    load_csv,
    load_readings_csv,
    make_windows,
    save_csv,
)
from graphtta.graph import GraphError, SensorGraph

from _util import random_graph


def dataset(x, valid=None):
    x = np.asarray(x, dtype=float)
    return Dataset(x, np.ones_like(x, dtype=bool) if valid is None else valid)


# generator


def test_generator_shape_and_determinism():
    a, ga = generate_synthetic(12, 600, 0.5, seed=4)
    b, gb = generate_synthetic(12, 600, 0.5, seed=4)
    assert a.readings.shape == (600, 12)
    assert a.readings.tobytes() == b.readings.tobytes()
    assert ga.adjacency.tobytes() == gb.adjacency.tobytes()
    assert np.all(np.isfinite(a.readings))
    assert ga.coords.min() >= 0 and ga.coords.max() <= 1


def test_generator_contracts():
    with pytest.raises(DataError):
        generate_synthetic(3, 600, 0.5)
    with pytest.raises(DataError):
        generate_synthetic(10, 100, 0.5)
    with pytest.raises(GraphError):
        generate_synthetic(6, 600, 0.5, sigma=1e-6, threshold=0.5)


def test_shift_touches_only_test_rows_of_shifted_nodes():
    base, _ = generate_synthetic(20, 2400, 0.0, seed=2)
    shifted, _ = generate_synthetic(20, 2400, 0.8, seed=2)
    t0 = shifted.meta["test_start"]
    np.testing.assert_array_equal(base.readings[:t0], shifted.readings[:t0])
    diff = np.abs(base.readings[t0:] - shifted.readings[t0:]).max(axis=0)
    moved = set(np.flatnonzero(diff > 0).tolist())
    assert moved and moved <= set(shifted.meta["shifted_nodes"])


@pytest.mark.parametrize("seed", range(3))
def test_no_shift_test_region_matches_train(seed):
    ds, _ = generate_synthetic(20, 19440, 0.0, seed=seed)
    t0 = ds.meta["test_start"]
    train = ds.readings[: int(0.7 * ds.n_timesteps)]
    test = ds.readings[t0:]
    # block means over whole periods give an honest standard error under autocorrelation
    period = 96
    blocks = test[: len(test) // period * period].reshape(-1, period, ds.n_nodes).mean(axis=1)
    se = blocks.std(axis=0, ddof=1) / np.sqrt(len(blocks))
    gap = np.abs(test.mean(axis=0) - train.mean(axis=0))
    assert np.all(gap < 5 * se + 1e-9), (gap / se).max()


# normalizer


def test_normalizer_examples():
    ds = dataset(np.array([[0.0], [10.0]] * 35 + [[3.0]] * 30))
    norm = fit_normalizer(ds)
    assert norm.apply(np.array([5.0]))[0] == 0.5
    assert norm.apply(np.array([12.0]))[0] == pytest.approx(1.2)


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_normalizer_round_trip(seed):
    x = np.random.default_rng(seed).normal(0, 5, size=(50, 4))
    norm = fit_normalizer(dataset(x))
    np.testing.assert_allclose(norm.invert(norm.apply(x)), x, rtol=0, atol=1e-12)
    y = norm.apply(x[:35])
    assert y.min() >= 0 and y.max() <= 1


def test_normalizer_constant_node_warns(caplog):
    x = np.column_stack([np.full(20, 4.0), np.arange(20.0)])
    with caplog.at_level(logging.WARNING):
        norm = fit_normalizer(dataset(x))
    assert "constant" in caplog.text
    assert np.all(norm.apply(x)[:, 0] == 0.0)


def test_normalizer_ignores_test_rows():
    x = np.random.default_rng(0).normal(size=(100, 3))
    a = fit_normalizer(dataset(x))
    x2 = x.copy()
    x2[70:] = 1e6
    b = fit_normalizer(dataset(x2))
    assert a.minimum.tobytes() == b.minimum.tobytes() and a.maximum.tobytes() == b.maximum.tobytes()


def test_split_bounds():
    assert SplitSpec().bounds(100) == {"train": (0, 70), "val": (70, 90), "test": (90, 100)}
    assert SplitSpec().bounds(4800) == SplitSpec().bounds(4800)
    with pytest.raises(DataError):
        SplitSpec(0.5, 0.2, 0.2)


# windows


def _plain_graph(n, virtual=()):
    m = np.zeros(n, dtype=bool)
    m[list(virtual)] = True
    return SensorGraph(np.ones((n, n)), m)


def test_two_windows_from_48_steps():
    x = np.random.default_rng(0).uniform(size=(48, 3))
    b = make_windows(x, np.ones_like(x, dtype=bool), (0, 48), _plain_graph(3), 24, 32)
    assert len(b) == 1 and b[0].batch_size == 2


def test_windows_order_coverage_and_virtual_rows():
    x = np.random.default_rng(1).uniform(size=(500, 5))
    g = _plain_graph(5, virtual=(1, 3))
    batches = make_windows(x, np.ones_like(x, dtype=bool), (100, 500), g, 24, 4)
    starts = np.concatenate([b.starts for b in batches])
    assert np.all(np.diff(starts) == 24) and starts[0] == 100 and starts[-1] + 24 <= 500
    assert [b.batch_index for b in batches] == list(range(len(batches)))
    assert batches[-1].batch_size == len(starts) - 4 * (len(batches) - 1)  # short tail kept
    for b in batches:
        assert np.all(b.readings[:, [1, 3]] == 0) and np.all(b.indicator[:, [1, 3]] == 1)
        assert np.all(b.indicator[:, [0, 2, 4]] == 0)
        np.testing.assert_array_equal(b.truth[0, :, 0], x[b.starts[0]])


def test_windows_split_too_short():
    x = np.zeros((30, 2))
    with pytest.raises(DataError):
        make_windows(x, np.ones_like(x, dtype=bool), (0, 20), _plain_graph(2), 24, 8)


# CSV


def test_load_csv_small(tmp_path):
    (tmp_path / "r.csv").write_text("a,b\n1,2\n3,\n5,6\n")
    (tmp_path / "a.csv").write_text("0,1\n1,0\n")
    ds, g = load_csv(tmp_path / "r.csv", tmp_path / "a.csv")
    assert (ds.n_timesteps, ds.n_nodes) == (3, 2)
    assert not ds.valid[1, 1] and ds.valid.sum() == 5
    (tmp_path / "a3.csv").write_text("0,1,0\n1,0,1\n0,1,0\n")
    with pytest.raises(DataError, match="2 nodes"):
        load_csv(tmp_path / "r.csv", tmp_path / "a3.csv")


def test_readings_csv_errors(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("a,b\n1,2\n3\n")
    with pytest.raises(DataError, match="row 3"):
        load_readings_csv(p)
    p.write_text("a,b\n1,2\n3,abc\n")
    with pytest.raises(DataError, match="row 3.*column 2"):
        load_readings_csv(p)


def test_csv_round_trip(tmp_path):
    ds, g = generate_synthetic(8, 300, 0.5, seed=1)
    ds.valid[5, 2] = False
    save_csv(ds, g, tmp_path)
    back, g2 = load_csv(tmp_path / "readings.csv", tmp_path / "adjacency.csv", tmp_path / "coords.csv")
    np.testing.assert_array_equal(back.valid, ds.valid)
    np.testing.assert_array_equal(back.readings[ds.valid], ds.readings[ds.valid])
    np.testing.assert_array_equal(g2.adjacency, g.adjacency)
    np.testing.assert_array_equal(g2.coords, g.coords)
