"""EMA memory of adapter parameters, used as a stable teacher graph."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .adapter import adapt_graph
from .autodiff import ParamSet
from .graph import SensorGraph


@dataclass
class MemoryState:
    theta: ParamSet
    alpha: float
    step_count: int = 0


def init_memory(mu0: ParamSet, alpha: float) -> MemoryState:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return MemoryState(mu0.copy(), float(alpha), 0)


def ema_update(state: MemoryState, mu: ParamSet) -> MemoryState:
    """``theta <- alpha * theta + (1 - alpha) * mu``, in place."""
    if not state.theta.compatible(mu):
        raise ad.ShapeError("memory and adapter parameters have different names or shapes")
    a = state.alpha
    for name, t in state.theta.items():
        t.data[...] = a * t.data + (1.0 - a) * mu[name].data
    state.step_count += 1
    return state


def shadow_refine(readings, indicator, graph: SensorGraph, state: MemoryState, **kwargs) -> np.ndarray:
    """Refined adjacency produced by the memory parameters; carries no gradient."""
    with ad.no_grad():
        ref = adapt_graph(readings, indicator, graph, state.theta, **kwargs)
    return np.array(ref.adjacency.data)
