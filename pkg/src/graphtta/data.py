"""Datasets, min-max normalization, chronological splits and streaming windows."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .graph import (
    GraphError,
    SensorGraph,
    gaussian_kernel_adjacency,
    load_adjacency_csv,
    load_coords_csv,
    save_adjacency_csv,
    save_coords_csv,
)

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    readings: np.ndarray  # T x N, physical units; missing entries hold 0
    valid: np.ndarray  # T x N bool, False where natively missing
    coords: np.ndarray | None = None
    interval: str = "5min"
    name: str = "dataset"
    node_ids: list[str] | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_timesteps(self) -> int:
        return self.readings.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.readings.shape[1]


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.7
    val: float = 0.2
    test: float = 0.1

    def __post_init__(self):
        if abs(self.train + self.val + self.test - 1.0) > 1e-9 or min(self.train, self.val, self.test) < 0:
            raise DataError("split fractions must be nonnegative and sum to 1")

    def bounds(self, n_timesteps: int) -> dict[str, tuple[int, int]]:
        train_end = int(np.floor(n_timesteps * self.train + 1e-9))
        val_end = int(np.floor(n_timesteps * (self.train + self.val) + 1e-9))
        return {"train": (0, train_end), "val": (train_end, val_end), "test": (val_end, n_timesteps)}


# ---------------------------------------------------------------------------
# normalization


@dataclass
class NormalizerState:
    minimum: np.ndarray
    maximum: np.ndarray

    @property
    def scale(self) -> np.ndarray:
        span = self.maximum - self.minimum
        return np.where(span > 0, span, 1.0)

    def apply(self, x, nodes=None) -> np.ndarray:
        lo, hi = self._sel(nodes)
        span = hi - lo
        out = np.where(span > 0, (np.asarray(x, dtype=np.float64) - lo) / np.where(span > 0, span, 1.0), 0.0)
        return out

    def invert(self, y, nodes=None) -> np.ndarray:
        lo, hi = self._sel(nodes)
        return np.asarray(y, dtype=np.float64) * (hi - lo) + lo

    def _sel(self, nodes):
        if nodes is None:
            return self.minimum, self.maximum
        return self.minimum[nodes], self.maximum[nodes]


def fit_normalizer(dataset: Dataset, split: SplitSpec = SplitSpec()) -> NormalizerState:
    """Per-node min and max over the training rows only."""
    lo_row, hi_row = split.bounds(dataset.n_timesteps)["train"]
    x = dataset.readings[lo_row:hi_row]
    ok = dataset.valid[lo_row:hi_row]
    if x.shape[0] == 0 or not ok.any(axis=0).all():
        raise DataError("every node needs at least one valid training reading")
    lo = np.where(ok, x, np.inf).min(axis=0)
    hi = np.where(ok, x, -np.inf).max(axis=0)
    const = np.flatnonzero(hi == lo)
    if len(const):
        log.warning("constant training readings for nodes %s; they normalize to 0.0", const.tolist())
    return NormalizerState(lo, hi)


# ---------------------------------------------------------------------------
# streaming batches


@dataclass
class StreamBatch:
    readings: np.ndarray  # B x N x P normalized, virtual and missing entries zeroed
    indicator: np.ndarray  # B x N x P, 1.0 where the entry is unavailable
    truth: np.ndarray  # B x N x P normalized ground truth (for scoring only)
    truth_valid: np.ndarray  # B x N x P bool
    graph: SensorGraph
    batch_index: int
    starts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def batch_size(self) -> int:
        return self.readings.shape[0]

    @property
    def window(self) -> int:
        return self.readings.shape[2]


def window_starts(lo: int, hi: int, window: int) -> np.ndarray:
    if hi - lo < window:
        raise DataError(f"split of {hi - lo} timesteps is shorter than the window {window}")
    return np.arange(lo, hi - window + 1, window)


def make_windows(
    normalized: np.ndarray,
    valid: np.ndarray,
    bounds: tuple[int, int],
    graph: SensorGraph,
    window: int = 24,
    batch_size: int = 32,
) -> list[StreamBatch]:
    """Non-overlapping windows in temporal order, grouped into batches.

    The final short batch is kept. Virtual rows are zeroed and flagged.
    """
    starts = window_starts(bounds[0], bounds[1], window)
    vm = graph.virtual_mask
    batches = []
    for b, i in enumerate(range(0, len(starts), batch_size)):
        s = starts[i : i + batch_size]
        idx = s[:, None] + np.arange(window)[None, :]
        truth = np.transpose(normalized[idx], (0, 2, 1))  # B x N x P
        ok = np.transpose(valid[idx], (0, 2, 1)).astype(bool)
        avail = ok & ~vm[None, :, None]
        batches.append(
            StreamBatch(
                readings=np.where(avail, truth, 0.0),
                indicator=(~avail).astype(np.float64),
                truth=np.where(ok, truth, 0.0),
                truth_valid=ok,
                graph=graph,
                batch_index=b,
                starts=s.copy(),
            )
        )
    return batches


def training_windows(normalized, valid, bounds, nodes, window: int = 24) -> tuple[np.ndarray, np.ndarray]:
    """``W x N_o x P`` windows over the given (observed) nodes."""
    starts = window_starts(bounds[0], bounds[1], window)
    idx = starts[:, None] + np.arange(window)[None, :]
    x = np.transpose(normalized[idx][:, :, nodes], (0, 2, 1))
    ok = np.transpose(valid[idx][:, :, nodes], (0, 2, 1)).astype(np.float64)
    return np.where(ok > 0, x, 0.0), ok


# ---------------------------------------------------------------------------
# synthetic benchmark


def _smoother(coupling: np.ndarray, self_weight: float) -> np.ndarray:
    m = coupling + self_weight * np.eye(coupling.shape[0])
    return m / m.sum(axis=1, keepdims=True)


def generate_synthetic(
    n_nodes: int = 40,
    n_timesteps: int = 4800,
    shift_strength: float = 0.5,
    seed: int = 0,
    *,
    window: int = 24,
    period: int = 96,
    sigma: float = 0.2,
    threshold: float = 0.1,
    noise: float = 0.05,
    shifted_fraction: float = 0.25,
    coupling: float = 4.0,
    level: float = 2.0,
    split: SplitSpec = SplitSpec(),
) -> tuple[Dataset, SensorGraph]:
    """Graph-smoothed sinusoid mixture with a coupling change in the test region.

    Inside the test split, the incoming coupling edges of a random
    ``shifted_fraction`` of sensors are rescaled by ``1 + 2 * shift_strength``,
    so those sensors drift away from what the distance graph suggests.
    """
    if n_nodes < 4:
        raise DataError("need at least 4 nodes")
    if n_timesteps < 10 * window:
        raise DataError(f"need at least {10 * window} timesteps")
    if shift_strength < 0:
        raise DataError("shift_strength must be nonnegative")
    rng = np.random.default_rng(seed)
    coords = rng.uniform(0.0, 1.0, size=(n_nodes, 2))
    for _attempt in range(5):
        adj = gaussian_kernel_adjacency(coords, sigma, threshold)
        if (adj > 0).any(axis=1).all():
            break
        sigma *= 1.5
    else:
        raise GraphError("synthetic graph stayed degenerate after 5 attempts")

    t = np.arange(n_timesteps)[:, None]
    amp = rng.uniform(0.5, 1.5, size=(2, n_nodes))
    phase = rng.uniform(0, 2 * np.pi, size=(2, n_nodes))
    base = amp[0] * np.sin(2 * np.pi * t / period + phase[0]) + amp[1] * np.sin(4 * np.pi * t / period + phase[1])
    # slow AR(1) drift so windows are not pure repeats
    drift = lfilter([1.0], [1.0, -0.97], rng.normal(0.0, 0.15, size=(n_timesteps, n_nodes)), axis=0)
    sources = level + base + drift

    smooth = _smoother(coupling * adj, 1.0)
    smooth = smooth @ smooth
    n_shift = max(1, int(round(shifted_fraction * n_nodes)))
    shifted_nodes = np.sort(rng.choice(n_nodes, size=n_shift, replace=False))
    # shifted sensors weigh their incoming neighbour couplings by a new gain
    smooth_test = smooth.copy()
    rows = np.zeros(n_nodes, dtype=bool)
    rows[shifted_nodes] = True
    smooth_test[rows[:, None] & ~np.eye(n_nodes, dtype=bool)] *= 1.0 + 2.0 * shift_strength
    test_lo = split.bounds(n_timesteps)["test"][0]

    readings = np.empty_like(sources)
    readings[:test_lo] = sources[:test_lo] @ smooth.T
    readings[test_lo:] = sources[test_lo:] @ smooth_test.T
    offsets = rng.normal(0.0, 0.3, size=n_nodes)
    readings += 10.0 + offsets + rng.normal(0.0, noise, size=readings.shape)

    ds = Dataset(readings, np.ones_like(readings, dtype=bool), coords, interval="5min", name=f"synthetic-{seed}")
    ds.meta = {
        "shifted_nodes": [int(i) for i in shifted_nodes],
        "test_start": int(test_lo),
        "sigma": float(sigma),
    }
    return ds, SensorGraph(adj, np.zeros(n_nodes, dtype=bool), coords)


# ---------------------------------------------------------------------------
# CSV interchange


def save_readings_csv(dataset: Dataset, path) -> None:
    ids = dataset.node_ids or [str(i) for i in range(dataset.n_nodes)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ids)
        for row, ok in zip(dataset.readings, dataset.valid):
            w.writerow([repr(float(x)) if k else "" for x, k in zip(row, ok)])


def load_readings_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise DataError(f"{path}: empty file")
        n = len(header)
        vals, valid = [], []
        for r, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n:
                raise DataError(f"{path}: row {r} has {len(row)} cells, expected {n}")
            v_row, ok_row = [], []
            for c, cell in enumerate(row, start=1):
                cell = cell.strip()
                if cell == "":
                    v_row.append(0.0)
                    ok_row.append(False)
                    continue
                try:
                    x = float(cell)
                except ValueError:
                    raise DataError(f"{path}: non-numeric cell {cell!r} at row {r}, column {c}") from None
                if not np.isfinite(x):
                    v_row.append(0.0)
                    ok_row.append(False)
                else:
                    v_row.append(x)
                    ok_row.append(True)
            vals.append(v_row)
            valid.append(ok_row)
    if not vals:
        raise DataError(f"{path}: no data rows")
    return Dataset(np.array(vals), np.array(valid, dtype=bool), name=Path(path).stem, node_ids=[h.strip() for h in header])


def load_csv(readings_path, adjacency_path, coords_path=None) -> tuple[Dataset, SensorGraph]:
    ds = load_readings_csv(readings_path)
    adj = load_adjacency_csv(adjacency_path)
    if adj.shape[0] != ds.n_nodes:
        raise DataError(f"readings have {ds.n_nodes} nodes but adjacency is {adj.shape[0]}x{adj.shape[1]}")
    coords = None
    if coords_path is not None:
        coords = load_coords_csv(coords_path)
        if coords.shape[0] != ds.n_nodes:
            raise DataError(f"coords list {coords.shape[0]} nodes, readings have {ds.n_nodes}")
        ds.coords = coords
    return ds, SensorGraph(adj, np.zeros(ds.n_nodes, dtype=bool), coords)


def save_csv(dataset: Dataset, graph: SensorGraph, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"readings": out / "readings.csv", "adjacency": out / "adjacency.csv"}
    save_readings_csv(dataset, paths["readings"])
    save_adjacency_csv(graph.adjacency, paths["adjacency"])
    if graph.coords is not None:
        paths["coords"] = out / "coords.csv"
        save_coords_csv(graph.coords, paths["coords"])
    return paths
