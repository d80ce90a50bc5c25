"""Topology adapter: per-virtual-node uncertainty scores and edge refinements.

A one-layer GCN encodes the current batch. A scorer MLP maps each virtual
node's batch-averaged representation to a score in (0, 1); a refiner MLP
maps the concatenated endpoint representations of every virtual-incident
edge to an additive weight change. The refined weight is
``A[u, v] + score[u] * delta[u, v]`` clamped at zero, and every other
entry of ``A`` is left untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .backbone import glorot
from .graph import SensorGraph, gcn_normalize, virtual_edge_arrays


def init_adapter(window: int, hidden_dim: int = 16, seed: int = 0) -> ParamSet:
    """Fresh adapter parameters. The refiner's output layer starts at zero,
    so the first refinement is the identity."""
    rng = np.random.default_rng(seed)
    p = ParamSet()
    p["gnn_w"] = glorot(rng, 2 * window, hidden_dim)
    p["gnn_b"] = np.zeros(hidden_dim)
    p["score_w1"] = glorot(rng, hidden_dim, hidden_dim)
    p["score_b1"] = np.zeros(hidden_dim)
    p["score_w2"] = glorot(rng, hidden_dim, 1)
    p["score_b2"] = np.zeros(1)
    p["refine_w1"] = glorot(rng, 2 * hidden_dim, hidden_dim)
    p["refine_b1"] = np.zeros(hidden_dim)
    p["refine_w2"] = np.zeros((hidden_dim, 1))
    p["refine_b2"] = np.zeros(1)
    return p


@dataclass
class ContextRepresentations:
    full: Tensor  # B x N x D
    node_mean: Tensor  # N x D, batch-averaged
    virtual_index: np.ndarray

    @property
    def virtual_mean(self) -> Tensor:
        return ad.take(self.node_mean, self.virtual_index, axis=0)


@dataclass
class AdjacencyDelta:
    rows: np.ndarray
    cols: np.ndarray
    values: Tensor  # one entry per (rows[k], cols[k])

    def as_dict(self) -> dict[tuple[int, int], float]:
        return {(int(u), int(v)): float(d) for u, v, d in zip(self.rows, self.cols, self.values.data)}

    def __len__(self):
        return len(self.rows)


def _mlp(x: Tensor, w1, b1, w2, b2) -> Tensor:
    return ad.relu(x @ w1 + b1) @ w2 + b2


def encode(readings, indicator, graph: SensorGraph, params: ParamSet, norm_adj=None) -> ContextRepresentations:
    x = np.concatenate([np.asarray(readings), np.asarray(indicator)], axis=-1)
    if norm_adj is None:
        norm_adj = gcn_normalize(graph.adjacency)
    full = ad.relu(ad.matmul(Tensor(norm_adj), Tensor(x) @ params["gnn_w"]) + params["gnn_b"])
    return ContextRepresentations(full, ad.mean(full, axis=0), graph.virtual_index)


def score_virtual(readings, indicator, graph: SensorGraph, params: ParamSet, norm_adj=None):
    """Return ``(representations, scores)``; scores has one entry per virtual node."""
    reps = encode(readings, indicator, graph, params, norm_adj)
    if graph.n_virtual == 0:
        return reps, Tensor(np.zeros(0))
    logits = _mlp(reps.virtual_mean, params["score_w1"], params["score_b1"], params["score_w2"], params["score_b2"])
    return reps, ad.sigmoid(ad.reshape(logits, (graph.n_virtual,)))


def compute_delta(reps: ContextRepresentations, graph: SensorGraph, params: ParamSet) -> AdjacencyDelta:
    rows, cols = virtual_edge_arrays(graph)
    if len(rows) == 0:
        return AdjacencyDelta(rows, cols, Tensor(np.zeros(0)))
    feats = ad.concat([ad.take(reps.node_mean, rows, 0), ad.take(reps.node_mean, cols, 0)], axis=1)
    out = _mlp(feats, params["refine_w1"], params["refine_b1"], params["refine_w2"], params["refine_b2"])
    return AdjacencyDelta(rows, cols, ad.reshape(out, (len(rows),)))


def refine_adjacency(graph: SensorGraph, scores: Tensor, delta: AdjacencyDelta) -> Tensor:
    """Refined (un-normalized) adjacency as a differentiable ``N x N`` Tensor."""
    a = graph.adjacency
    if len(delta) == 0:
        return Tensor(a)
    # position of each edge's source among the virtual nodes
    slot = np.full(graph.n_nodes, -1, dtype=np.intp)
    slot[graph.virtual_index] = np.arange(graph.n_virtual)
    gate = ad.take(scores, slot[delta.rows], axis=0)
    refined = ad.relu(Tensor(a[delta.rows, delta.cols]) + gate * delta.values)
    base = a.copy()
    base[delta.rows, delta.cols] = 0.0
    return ad.scatter_add(Tensor(base), delta.rows, delta.cols, refined)


@dataclass
class Refinement:
    reps: ContextRepresentations
    scores: Tensor
    delta: AdjacencyDelta
    adjacency: Tensor  # refined, un-normalized

    def normalized(self) -> Tensor:
        return gcn_normalize(self.adjacency)


def adapt_graph(
    readings,
    indicator,
    graph: SensorGraph,
    params: ParamSet,
    *,
    use_scores: bool = True,
    fixed_delta: np.ndarray | None = None,
    norm_adj=None,
) -> Refinement:
    """Full adapter pass. ``use_scores=False`` forces every score to 1 and
    ``fixed_delta`` swaps the learned refiner output for constant values;
    both exist for ablations."""
    reps, scores = score_virtual(readings, indicator, graph, params, norm_adj)
    if not use_scores:
        scores = Tensor(np.ones(graph.n_virtual))
    if fixed_delta is None:
        delta = compute_delta(reps, graph, params)
    else:
        rows, cols = virtual_edge_arrays(graph)
        if len(fixed_delta) != len(rows):
            raise ad.ShapeError("fixed_delta must have one value per virtual-incident edge")
        delta = AdjacencyDelta(rows, cols, Tensor(fixed_delta))
    return Refinement(reps, scores, delta, refine_adjacency(graph, scores, delta))
