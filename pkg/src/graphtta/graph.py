"""Sensor graphs: observed/virtual partition, GCN normalization, virtual selection."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad


class GraphError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SensorGraph:
    """Dense weighted graph over ``N`` sensors.

    ``virtual_mask[i]`` is True when sensor ``i`` is virtual (no readings).
    The stored adjacency has a zero diagonal; self-loops are added only by
    :func:`gcn_normalize`.
    """

    adjacency: np.ndarray
    virtual_mask: np.ndarray
    coords: np.ndarray | None = None
    _neighbors: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        a = np.array(self.adjacency, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise GraphError(f"adjacency must be square, got {a.shape}")
        if not np.all(np.isfinite(a)) or np.any(a < 0):
            raise GraphError("adjacency entries must be finite and nonnegative")
        np.fill_diagonal(a, 0.0)
        a.setflags(write=False)
        vm = np.zeros(a.shape[0], dtype=bool) if self.virtual_mask is None else np.array(self.virtual_mask, dtype=bool)
        if vm.shape != (a.shape[0],):
            raise GraphError("virtual_mask length must equal number of nodes")
        if vm.all():
            raise GraphError("at least one observed node is required")
        vm.setflags(write=False)
        object.__setattr__(self, "adjacency", a)
        object.__setattr__(self, "virtual_mask", vm)
        if self.coords is not None:
            c = np.array(self.coords, dtype=np.float64)
            if c.shape != (a.shape[0], 2):
                raise GraphError(f"coords must be N x 2, got {c.shape}")
            c.setflags(write=False)
            object.__setattr__(self, "coords", c)
        support = (a > 0) | (a.T > 0)
        nbrs = {int(u): np.flatnonzero(support[u]) for u in np.flatnonzero(vm)}
        object.__setattr__(self, "_neighbors", nbrs)

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def virtual_index(self) -> np.ndarray:
        return np.flatnonzero(self.virtual_mask)

    @property
    def observed_index(self) -> np.ndarray:
        return np.flatnonzero(~self.virtual_mask)

    @property
    def n_virtual(self) -> int:
        return int(self.virtual_mask.sum())

    @property
    def n_observed(self) -> int:
        return self.n_nodes - self.n_virtual

    def virtual_neighbors(self, u: int) -> np.ndarray:
        return self._neighbors[int(u)]

    def average_virtual_degree(self) -> float:
        if not self._neighbors:
            return 0.0
        return float(np.mean([len(v) for v in self._neighbors.values()]))

    def with_virtual(self, virtual_mask) -> "SensorGraph":
        return SensorGraph(self.adjacency, virtual_mask, self.coords)

    def with_adjacency(self, adjacency) -> "SensorGraph":
        return SensorGraph(adjacency, self.virtual_mask, self.coords)

    def subgraph(self, nodes) -> "SensorGraph":
        nodes = np.asarray(nodes, dtype=np.intp)
        coords = None if self.coords is None else self.coords[nodes]
        return SensorGraph(self.adjacency[np.ix_(nodes, nodes)], self.virtual_mask[nodes], coords)


def gcn_normalize(adjacency):
    """``D^{-1/2} (A + I) D^{-1/2}`` with ``D`` the row sums of ``A + I``.

    Accepts an ndarray (returns ndarray) or a :class:`Tensor` (returns a
    differentiable Tensor).
    """
    if isinstance(adjacency, ad.Tensor):
        n = adjacency.shape[0]
        a_hat = adjacency + np.eye(n)
        dinv = ad.power(a_hat.sum(axis=1), -0.5)
        return ad.reshape(dinv, (n, 1)) * a_hat * ad.reshape(dinv, (1, n))
    a = np.asarray(adjacency, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise GraphError(f"adjacency must be square, got {a.shape}")
    if np.any(a < 0):
        raise GraphError("adjacency must be nonnegative")
    a_hat = a + np.eye(a.shape[0])
    dinv = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return dinv[:, None] * a_hat * dinv[None, :]


def gaussian_kernel_adjacency(coords, sigma: float, threshold: float = 0.0) -> np.ndarray:
    if sigma <= 0:
        raise GraphError("sigma must be positive")
    if not 0 <= threshold < 1:
        raise GraphError("threshold must lie in [0, 1)")
    c = np.asarray(coords, dtype=np.float64)
    d2 = ((c[:, None, :] - c[None, :, :]) ** 2).sum(-1)
    w = np.exp(-d2 / sigma**2)
    w[w <= threshold] = 0.0
    np.fill_diagonal(w, 0.0)
    return w


@dataclass(frozen=True)
class VirtualSelection:
    pattern: str
    ratio: float
    seed: int
    selected: tuple[int, ...]

    def mask(self, n_nodes: int) -> np.ndarray:
        m = np.zeros(n_nodes, dtype=bool)
        m[list(self.selected)] = True
        return m


def _n_virtual(n_nodes: int, ratio: float) -> int:
    if not 0 < ratio < 1:
        raise GraphError(f"virtual ratio must be in (0, 1), got {ratio}")
    k = int(round(ratio * n_nodes))
    if n_nodes - k < 1:
        raise GraphError(f"ratio {ratio} on {n_nodes} nodes leaves no observed node")
    return k


def select_virtual_random(n_nodes: int, ratio: float, seed: int) -> VirtualSelection:
    k = _n_virtual(n_nodes, ratio)
    rng = np.random.default_rng(seed)
    picked = rng.choice(n_nodes, size=k, replace=False)
    return VirtualSelection("random", ratio, seed, tuple(int(i) for i in np.sort(picked)))


def select_virtual_regional(coords, ratio: float, seed: int) -> VirtualSelection:
    """Grow a spatially contiguous virtual cluster around a random seed node."""
    if coords is None:
        raise GraphError("regional selection needs node coordinates")
    c = np.asarray(coords, dtype=np.float64)
    n = c.shape[0]
    k = _n_virtual(n, ratio)
    rng = np.random.default_rng(seed)
    center = int(rng.integers(n))
    dist = np.linalg.norm(c - c[center], axis=1)
    # stable sort keeps ties deterministic (lower index first)
    picked = np.argsort(dist, kind="stable")[:k]
    return VirtualSelection("regional", ratio, seed, tuple(int(i) for i in np.sort(picked)))


def select_virtual(pattern: str, n_nodes: int, ratio: float, seed: int, coords=None) -> VirtualSelection:
    if pattern == "random":
        return select_virtual_random(n_nodes, ratio, seed)
    if pattern == "regional":
        return select_virtual_regional(coords, ratio, seed)
    raise GraphError(f"unknown virtual pattern {pattern!r}")


def virtual_incident_edges(graph: SensorGraph) -> list[tuple[int, int]]:
    """Directed pairs ``(u, v)`` with ``u`` virtual and ``v`` a neighbour of ``u``."""
    return [(u, int(v)) for u in graph.virtual_index.tolist() for v in graph.virtual_neighbors(u)]


def virtual_edge_arrays(graph: SensorGraph) -> tuple[np.ndarray, np.ndarray]:
    pairs = virtual_incident_edges(graph)
    if not pairs:
        return np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp)
    rows, cols = zip(*pairs)
    return np.asarray(rows, dtype=np.intp), np.asarray(cols, dtype=np.intp)


# CSV interchange


def save_adjacency_csv(adjacency, path) -> None:
    np.savetxt(path, np.asarray(adjacency), delimiter=",", fmt="%.17g")


def load_adjacency_csv(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for r, line in enumerate(csv.reader(fh), start=1):
            if not line:
                continue
            vals = []
            for c, cell in enumerate(line, start=1):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise GraphError(f"{path}: non-numeric cell {cell!r} at row {r}, column {c}") from None
            rows.append(vals)
    n = len(rows)
    for r, row in enumerate(rows, start=1):
        if len(row) != n:
            raise GraphError(f"{path}: row {r} has {len(row)} columns, expected {n}")
    return np.array(rows, dtype=np.float64).reshape(n, n)


def save_coords_csv(coords, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "x", "y"])
        for i, (x, y) in enumerate(np.asarray(coords)):
            w.writerow([i, repr(float(x)), repr(float(y))])


def load_coords_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["node_id", "x", "y"]:
            raise GraphError(f"{Path(path).name}: expected header node_id,x,y")
        pts = {}
        for r, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise GraphError(f"{path}: row {r} needs 3 columns")
            try:
                pts[int(row[0])] = (float(row[1]), float(row[2]))
            except ValueError as exc:
                raise GraphError(f"{path}: bad value in row {r}: {exc}") from exc
    n = len(pts)
    if sorted(pts) != list(range(n)):
        raise GraphError(f"{path}: node ids must be 0..{n - 1}")
    return np.array([pts[i] for i in range(n)], dtype=np.float64)
