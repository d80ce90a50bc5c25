"""End-to-end glue: dataset -> virtual split -> frozen backbone -> test stream."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import BackboneModel, PretrainConfig, pretrain
from .data import Dataset, NormalizerState, SplitSpec, StreamBatch, fit_normalizer, make_windows, training_windows
from .engine import AdaptationReport, TTAConfig, run_stream
from .graph import SensorGraph, VirtualSelection, select_virtual


@dataclass
class Experiment:
    dataset: Dataset
    graph: SensorGraph  # full graph with the virtual partition attached
    selection: VirtualSelection
    normalizer: NormalizerState
    normalized: np.ndarray
    split: SplitSpec
    window: int

    @property
    def observed(self) -> np.ndarray:
        return self.graph.observed_index

    def bounds(self, name: str) -> tuple[int, int]:
        return self.split.bounds(self.dataset.n_timesteps)[name]

    def stream(self, name: str = "test", batch_size: int = 32) -> list[StreamBatch]:
        return make_windows(self.normalized, self.dataset.valid, self.bounds(name), self.graph, self.window, batch_size)

    def observed_graph(self) -> SensorGraph:
        return self.graph.subgraph(self.observed).with_virtual(None)

    def train_windows(self):
        return training_windows(self.normalized, self.dataset.valid, self.bounds("train"), self.observed, self.window)


def prepare(
    dataset: Dataset,
    graph: SensorGraph,
    *,
    virtual_ratio: float = 0.5,
    pattern: str = "random",
    seed: int = 0,
    window: int = 24,
    split: SplitSpec = SplitSpec(),
) -> Experiment:
    sel = select_virtual(pattern, dataset.n_nodes, virtual_ratio, seed, coords=graph.coords)
    vgraph = graph.with_virtual(sel.mask(dataset.n_nodes))
    norm = fit_normalizer(dataset, split)
    normalized = np.where(dataset.valid, norm.apply(dataset.readings), 0.0)
    return Experiment(dataset, vgraph, sel, norm, normalized, split, window)


def train_backbone(exp: Experiment, config: PretrainConfig, history: list | None = None) -> BackboneModel:
    x, ok = exp.train_windows()
    return pretrain(x, exp.observed_graph().adjacency, config, valid=ok, history=history)


def compare(model: BackboneModel, batches, config: TTAConfig, normalizer) -> tuple[AdaptationReport, AdaptationReport]:
    base = run_stream(model, batches, config, adapt=False, normalizer=normalizer)
    adapted = run_stream(model, batches, config, adapt=True, normalizer=normalizer)
    return base, adapted
