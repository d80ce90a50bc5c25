"""Frozen spatial-interpolation backbone: a two-layer GCN with a per-node head.

Each node-timestep carries its (zero-filled) reading plus a binary missing
indicator, so the model can tell a masked sensor from a true zero.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .graph import gcn_normalize

log = logging.getLogger(__name__)

FORMAT_NAME = "graphtta-params"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


def glorot(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-bound, bound, size=(n_in, n_out))


@dataclass
class BackboneModel:
    params: ParamSet
    hidden_dim: int
    window: int
    frozen: bool = False

    @classmethod
    def init(cls, window: int, hidden_dim: int = 32, seed: int = 0, zero_head: bool = False) -> "BackboneModel":
        rng = np.random.default_rng(seed)
        p = ParamSet()
        p["w1"] = glorot(rng, 2 * window, hidden_dim)
        p["b1"] = np.zeros(hidden_dim)
        p["w2"] = glorot(rng, hidden_dim, hidden_dim)
        p["b2"] = np.zeros(hidden_dim)
        p["w_out"] = np.zeros((hidden_dim, window)) if zero_head else glorot(rng, hidden_dim, window)
        p["b_out"] = np.zeros(window)
        return cls(p, hidden_dim, window)

    def freeze(self) -> "BackboneModel":
        for t in self.params.values():
            t.data.setflags(write=False)
        self.frozen = True
        return self

    def checksum(self) -> str:
        return self.params.checksum()


def backbone_forward(model: BackboneModel, readings, indicator, norm_adj) -> Tensor:
    """Predict ``B x N x P`` readings for every node.

    ``norm_adj`` must already be GCN-normalized; it may be a Tensor that
    carries gradients back to an adapter.
    """
    x = readings.data if isinstance(readings, Tensor) else np.asarray(readings, dtype=np.float64)
    m = indicator.data if isinstance(indicator, Tensor) else np.asarray(indicator, dtype=np.float64)
    if x.ndim != 3 or x.shape != m.shape:
        raise ad.ShapeError(f"readings {x.shape} and indicator {m.shape} must both be B x N x P")
    if x.shape[2] != model.window:
        raise ad.ShapeError(f"window length {x.shape[2]} != model window {model.window}")
    if norm_adj.shape != (x.shape[1], x.shape[1]):
        raise ad.ShapeError(f"adjacency {norm_adj.shape} does not match {x.shape[1]} nodes")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(m))):
        raise ValueError("backbone input contains non-finite values")
    p = model.params
    feats = Tensor(np.concatenate([x, m], axis=-1))
    h = ad.relu(ad.matmul(norm_adj, feats @ p["w1"]) + p["b1"])
    h = ad.relu(ad.matmul(norm_adj, h @ p["w2"]) + p["b2"])
    return h @ p["w_out"] + p["b_out"]


@dataclass
class PretrainConfig:
    epochs: int = 20
    mask_fraction: float = 0.5
    lr: float = 5e-3
    seed: int = 0
    hidden_dim: int = 32
    batch_size: int = 32

    def __post_init__(self):
        if not 0 < self.mask_fraction < 1:
            raise ValueError("mask_fraction must be in (0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


def hide_nodes(rng: np.random.Generator, n_nodes: int, fraction: float) -> np.ndarray:
    k = max(1, int(round(fraction * n_nodes)))
    return np.sort(rng.choice(n_nodes, size=k, replace=False))


def pretrain(windows, adjacency, config: PretrainConfig, valid=None, history: list | None = None) -> BackboneModel:
    """Train on observed nodes by hiding a random subset each step, then freeze.

    ``windows`` is a ``W x N_o x P`` array of normalized readings; ``valid``
    (same shape, optional) flags entries that carry a real reading.
    Per-epoch mean losses are appended to ``history`` when given.
    """
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3 or len(windows) == 0:
        raise ValueError("need at least one B x N x P training window")
    valid = np.ones_like(windows) if valid is None else np.asarray(valid, dtype=np.float64)
    n_windows, n_nodes, window = windows.shape
    rng = np.random.default_rng(config.seed)
    model = BackboneModel.init(window, config.hidden_dim, seed=config.seed)
    norm_adj = Tensor(gcn_normalize(adjacency))
    opt = ad.Adam(lr=config.lr)
    history = [] if history is None else history
    for epoch in range(config.epochs):
        order = rng.permutation(n_windows)
        losses = []
        for start in range(0, n_windows, config.batch_size):
            idx = order[start : start + config.batch_size]
            truth, ok = windows[idx], valid[idx]
            hidden = hide_nodes(rng, n_nodes, config.mask_fraction)
            x = truth * ok
            ind = 1.0 - ok
            x[:, hidden, :] = 0.0
            ind[:, hidden, :] = 1.0
            target_w = np.zeros_like(truth)
            target_w[:, hidden, :] = ok[:, hidden, :]
            denom = target_w.sum()
            if denom == 0:
                continue
            pred = backbone_forward(model, x, ind, norm_adj)
            loss = ad.tsum(ad.tabs(pred - truth) * target_w) * (1.0 / denom)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"pretraining loss became {loss.item()} at epoch {epoch + 1}")
            grads = ad.backward(loss, model.params)
            opt.step(model.params, grads)
            losses.append(loss.item())
        history.append(float(np.mean(losses)) if losses else float("nan"))
        log.debug("pretrain epoch %d loss %.5f", epoch + 1, history[-1])
    return model.freeze()


# ---------------------------------------------------------------------------
# serialization


def params_to_json(params: ParamSet) -> dict:
    return {k: {"shape": list(v.shape), "values": v.data.ravel().tolist()} for k, v in params.items()}


def params_from_json(blob: dict) -> ParamSet:
    ps = ParamSet()
    for k, spec in blob.items():
        arr = np.asarray(spec["values"], dtype=np.float64)
        shape = tuple(spec["shape"])
        if arr.size != int(np.prod(shape)):
            raise ModelFormatError(f"parameter {k!r}: {arr.size} values for shape {shape}")
        ps[k] = arr.reshape(shape)
    return ps


def write_container(path, kind: str, params: dict[str, ParamSet], meta: dict) -> None:
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta,
        "params": {name: params_to_json(ps) for name, ps in params.items()},
    }
    Path(path).write_text(json.dumps(doc))


def read_container(path, kind: str) -> tuple[dict[str, ParamSet], dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ModelFormatError(f"{path}: corrupt or truncated parameter file ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
        raise ModelFormatError(f"{path}: not a {FORMAT_NAME} file")
    if doc.get("version") != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: format version {doc.get('version')} unsupported (expected {FORMAT_VERSION})")
    if doc.get("kind") != kind:
        raise ModelFormatError(f"{path}: holds {doc.get('kind')!r}, expected {kind!r}")
    try:
        params = {name: params_from_json(blob) for name, blob in doc["params"].items()}
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"{path}: malformed parameter block ({exc})") from exc
    return params, doc.get("meta", {})


def save_model(model: BackboneModel, path, extra: dict | None = None) -> None:
    meta = {"hidden_dim": model.hidden_dim, "window": model.window, "frozen": model.frozen}
    meta.update(extra or {})
    write_container(path, "backbone", {"backbone": model.params}, meta)


def load_model(path) -> tuple[BackboneModel, dict]:
    params, meta = read_container(path, "backbone")
    try:
        model = BackboneModel(params["backbone"], int(meta["hidden_dim"]), int(meta["window"]))
    except KeyError as exc:
        raise ModelFormatError(f"{path}: missing field {exc}") from exc
    expected = BackboneModel.init(model.window, model.hidden_dim).params.shapes()
    if model.params.shapes() != expected:
        raise ModelFormatError(f"{path}: parameter shapes do not match a backbone of this size")
    if meta.get("frozen", True):
        model.freeze()
    return model, meta
