"""Streaming test-time graph adaptation around a frozen backbone."""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .adapter import AdjacencyDelta, Refinement, adapt_graph, init_adapter
from .autodiff import ParamSet, Tensor
from .backbone import BackboneModel, backbone_forward
from .data import NormalizerState, StreamBatch
from .graph import gcn_normalize, virtual_edge_arrays
from .memory import MemoryState, ema_update, init_memory, shadow_refine
from .metrics import evaluate

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_vus", "no_ar", "no_tba")


@dataclass
class TTAConfig:
    r_weak: float = 0.1
    r_strong: float = 0.5
    lam: float = 1.0
    alpha: float = 0.99
    steps_per_batch: int = 1
    lr: float = 1e-3
    seed: int = 0
    hidden_dim: int = 16
    variant: str = "full"
    mape_eps: float = 1e-4

    def __post_init__(self):
        if not 0.0 <= self.r_weak < self.r_strong <= 1.0:
            raise ValueError(f"need 0 <= r_weak < r_strong <= 1, got {self.r_weak}, {self.r_strong}")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.steps_per_batch < 1:
            raise ValueError("steps_per_batch must be at least 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")

    def as_dict(self) -> dict:
        return asdict(self)


def _subseed(*parts) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def mask_augment(readings, indicator, rate: float, seed: int, batch_index: int = 0, view: str = "weak"):
    """Hide each available entry independently with probability ``rate``.

    Entries that are already unavailable (virtual rows, native gaps) stay as
    they are. The draw depends only on ``(seed, batch_index, view)``.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError("mask rate must lie in [0, 1]")
    readings = np.asarray(readings, dtype=np.float64)
    indicator = np.asarray(indicator, dtype=np.float64)
    rng = np.random.default_rng(_subseed(seed, batch_index, view))
    hit = (rng.random(readings.shape) < rate) & (indicator == 0)
    return np.where(hit, 0.0, readings), np.where(hit, 1.0, indicator)


def spatial_loss(y_weak: Tensor, y_strong: Tensor) -> Tensor:
    return ad.mean_abs_diff(y_weak, y_strong)


def temporal_loss(y_teacher, y_weak: Tensor) -> Tensor:
    """Distance from the weak prediction to a detached teacher prediction."""
    teacher = y_teacher.detach() if isinstance(y_teacher, Tensor) else Tensor(y_teacher)
    return ad.mean_abs_diff(teacher, y_weak)


def reg_term(delta: AdjacencyDelta) -> Tensor:
    """Mean absolute edge change; zero for an empty delta."""
    if len(delta) == 0:
        return Tensor(0.0)
    return ad.mean(ad.tabs(delta.values))


def virtual_rows(pred: Tensor, batch: StreamBatch) -> Tensor:
    return ad.take(pred, batch.graph.virtual_index, axis=1)


def consistency_forward(model: BackboneModel, batch: StreamBatch, norm_adj, config: TTAConfig):
    """Weak/strong masked predictions on virtual rows, plus the weak inputs."""
    xw, iw = mask_augment(batch.readings, batch.indicator, config.r_weak, config.seed, batch.batch_index, "weak")
    xs, is_ = mask_augment(batch.readings, batch.indicator, config.r_strong, config.seed, batch.batch_index, "strong")
    y_w = virtual_rows(backbone_forward(model, xw, iw, norm_adj), batch)
    y_s = virtual_rows(backbone_forward(model, xs, is_, norm_adj), batch)
    return y_w, y_s, (xw, iw)


@dataclass
class AdapterState:
    """Everything that persists across batches of one stream."""

    mu: ParamSet
    memory: MemoryState | None
    optimizer: ad.Adam
    fixed_delta: np.ndarray | None = None
    base_norm: np.ndarray | None = None

    @classmethod
    def fresh(cls, batch_template: StreamBatch, config: TTAConfig) -> "AdapterState":
        mu = init_adapter(batch_template.window, config.hidden_dim, seed=_subseed(config.seed, "adapter") % 2**32)
        memory = None if config.variant == "no_tba" else init_memory(mu, config.alpha)
        fixed = None
        if config.variant == "no_ar":
            graph = batch_template.graph
            rows, cols = virtual_edge_arrays(graph)
            rng = np.random.default_rng(_subseed(config.seed, "random-delta"))
            scale = graph.adjacency[rows, cols].mean() if len(rows) else 0.0
            fixed = rng.normal(0.0, scale, size=len(rows))
        return cls(mu, memory, ad.Adam(lr=config.lr), fixed, gcn_normalize(batch_template.graph.adjacency))


def _adapter_kwargs(state: AdapterState, config: TTAConfig) -> dict:
    return {"use_scores": config.variant != "no_vus", "fixed_delta": state.fixed_delta, "norm_adj": state.base_norm}


@dataclass
class StepLosses:
    total: float
    spatial: float
    temporal: float
    reg: float


def batch_objective(model, batch, mu, state: AdapterState, config: TTAConfig, teacher_adj=None):
    """Total loss and its parts for adapter parameters ``mu``.

    ``teacher_adj`` is the memory's refined adjacency (already detached); the
    teacher sees the same weak view as the student.
    """
    ref = adapt_graph(batch.readings, batch.indicator, batch.graph, mu, **_adapter_kwargs(state, config))
    norm_adj = ref.normalized()
    y_w, y_s, (xw, iw) = consistency_forward(model, batch, norm_adj, config)
    l_spatial = spatial_loss(y_w, y_s)
    if teacher_adj is not None:
        with ad.no_grad():
            y_t = virtual_rows(backbone_forward(model, xw, iw, gcn_normalize(teacher_adj)), batch)
        l_temporal = temporal_loss(y_t, y_w)
    else:
        l_temporal = Tensor(0.0)
    reg = reg_term(ref.delta)
    total = l_spatial + l_temporal + config.lam * reg
    return total, (l_spatial, l_temporal, reg), ref


def adapt_batch(model: BackboneModel, batch: StreamBatch, state: AdapterState, config: TTAConfig):
    """Optimize the adapter on one batch, update the memory, return the refinement.

    On a non-finite loss the batch's updates are rolled back and the
    unrefined adjacency is returned with ``losses=None``.
    """
    if batch.graph.n_virtual == 0:
        return Tensor(batch.graph.adjacency), None, 0.0
    snapshot = state.mu.copy()
    opt_snapshot = state.optimizer.state_dict()
    teacher = None
    if state.memory is not None:
        teacher = shadow_refine(batch.readings, batch.indicator, batch.graph, state.memory, **_adapter_kwargs(state, config))
    losses = None
    try:
        for _ in range(config.steps_per_batch):
            total, (ls, lt, reg), _ref = batch_objective(model, batch, state.mu, state, config, teacher)
            if not np.isfinite(total.item()):
                raise FloatingPointError(f"non-finite adaptation loss {total.item()} on batch {batch.batch_index}")
            grads = ad.backward(total, state.mu)
            state.optimizer.step(state.mu, grads)
            losses = StepLosses(total.item(), ls.item(), lt.item(), reg.item())
    except (FloatingPointError, ad.GradientError) as exc:
        log.warning("batch %d skipped: %s", batch.batch_index, exc)
        for name, t in snapshot.items():
            state.mu[name].data[...] = t.data
        state.optimizer.load_state_dict(opt_snapshot)
        return Tensor(batch.graph.adjacency), None, 0.0
    if state.memory is not None:
        ema_update(state.memory, state.mu)
    with ad.no_grad():
        ref = adapt_graph(batch.readings, batch.indicator, batch.graph, state.mu, **_adapter_kwargs(state, config))
    mean_abs_delta = float(np.mean(np.abs(ref.delta.values.data))) if len(ref.delta) else 0.0
    return ref.adjacency.detach(), losses, mean_abs_delta


def infer_batch(model: BackboneModel, batch: StreamBatch, adjacency) -> np.ndarray:
    """Unaugmented backbone predictions at virtual rows, ``B x N_u x P``."""
    a = adjacency.data if isinstance(adjacency, Tensor) else np.asarray(adjacency)
    with ad.no_grad():
        pred = backbone_forward(model, batch.readings, batch.indicator, Tensor(gcn_normalize(a)))
    return pred.data[:, batch.graph.virtual_index, :]


@dataclass
class BatchRecord:
    batch_index: int
    n_windows: int
    total_loss: float
    spatial_loss: float
    temporal_loss: float
    reg: float
    mean_abs_delta: float
    mae: float
    mre: float
    mape: float
    seconds: float
    status: str = "ok"


@dataclass
class AdaptationReport:
    records: list[BatchRecord] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    @property
    def stream_mae(self) -> float:
        return self.summary["mae"]


def _virtual_truth(batch: StreamBatch):
    vi = batch.graph.virtual_index
    return batch.truth[:, vi, :], batch.truth_valid[:, vi, :]


def run_stream(
    model: BackboneModel,
    batches: list[StreamBatch],
    config: TTAConfig,
    adapt: bool = True,
    normalizer: NormalizerState | None = None,
    state: AdapterState | None = None,
    clock=time.perf_counter,
) -> AdaptationReport:
    """Adapt (optionally) and infer every batch in arrival order.

    Metrics are computed on virtual rows after inverting ``normalizer``.
    """
    if not batches:
        raise ValueError("empty stream")
    graph = batches[0].graph
    if any(b.graph is not graph and not np.array_equal(b.graph.adjacency, graph.adjacency) for b in batches):
        raise ValueError("all batches of a stream must share one graph")
    if adapt and state is None:
        state = AdapterState.fresh(batches[0], config)
    vi = graph.virtual_index
    report = AdaptationReport()
    all_pred, all_true = [], []
    for batch in batches:
        t0 = clock()
        status = "ok"
        losses, mad = None, 0.0
        try:
            if adapt:
                adj, losses, mad = adapt_batch(model, batch, state, config)
                if losses is None and graph.n_virtual:
                    status = "rolled_back"
            else:
                adj = graph.adjacency
            pred = infer_batch(model, batch, adj)
        except Exception as exc:  # a bad batch must not end the stream
            log.error("batch %d failed: %s", batch.batch_index, exc)
            report.records.append(
                BatchRecord(batch.batch_index, batch.batch_size, *([float("nan")] * 8), seconds=clock() - t0, status=f"error: {exc}")
            )
            continue
        seconds = clock() - t0
        truth, ok = _virtual_truth(batch)
        if normalizer is not None:
            pred = normalizer.invert(pred.transpose(0, 2, 1), vi).transpose(0, 2, 1)
            truth = normalizer.invert(truth.transpose(0, 2, 1), vi).transpose(0, 2, 1)
        p, tr = pred[ok], truth[ok]
        all_pred.append(p)
        all_true.append(tr)
        m = evaluate(p, tr, config.mape_eps)
        report.records.append(
            BatchRecord(
                batch_index=batch.batch_index,
                n_windows=batch.batch_size,
                total_loss=losses.total if losses else 0.0,
                spatial_loss=losses.spatial if losses else 0.0,
                temporal_loss=losses.temporal if losses else 0.0,
                reg=losses.reg if losses else 0.0,
                mean_abs_delta=mad,
                mae=m.mae,
                mre=m.mre,
                mape=m.mape,
                seconds=seconds,
                status=status,
            )
        )
    if all_pred:
        agg = evaluate(np.concatenate(all_pred), np.concatenate(all_true), config.mape_eps).as_dict()
    else:
        agg = {"mae": float("nan"), "mre": float("nan"), "mape": float("nan"), "n_entries": 0}
    secs = [r.seconds for r in report.records]
    deltas = [r.mean_abs_delta for r in report.records if r.status == "ok"]
    agg.update(
        n_batches=len(report.records),
        n_errors=sum(r.status.startswith("error") for r in report.records),
        mean_batch_seconds=float(np.mean(secs)),
        total_seconds=float(np.sum(secs)),
        mean_abs_delta=float(np.mean(deltas)) if deltas else 0.0,
        adapt=adapt,
    )
    report.summary = agg
    return report


def save_adapter_state(state: AdapterState, path, config: TTAConfig) -> None:
    """Checkpoint adapter and memory parameters in the shared parameter container."""
    from .backbone import write_container

    params = {"mu": state.mu}
    meta = {"config": config.as_dict(), "step_count": 0, "has_memory": state.memory is not None}
    if state.memory is not None:
        params["theta"] = state.memory.theta
        meta["step_count"] = state.memory.step_count
    write_container(path, "adapter", params, meta)


def load_adapter_state(path, batch_template: StreamBatch, config: TTAConfig) -> AdapterState:
    """Resume a stream from :func:`save_adapter_state`; optimizer moments start fresh."""
    from .backbone import ModelFormatError, read_container

    params, meta = read_container(path, "adapter")
    state = AdapterState.fresh(batch_template, config)
    if "mu" not in params or not state.mu.compatible(params["mu"]):
        raise ModelFormatError(f"{path}: adapter parameters do not fit this stream")
    state.mu = params["mu"]
    if state.memory is not None:
        if "theta" not in params or not state.mu.compatible(params["theta"]):
            raise ModelFormatError(f"{path}: checkpoint has no usable memory parameters")
        state.memory = MemoryState(params["theta"], config.alpha, int(meta.get("step_count", 0)))
    return state
