"""Online test-time adaptation with [CLS] information augmentation.

Per incoming batch (one forward pass, predictions taken before any update):

    loss = mean entropy(softmax(logits))
           + lam * sum_l ||mu_l - mu_l^S||^2 + ||var_l - var_l^S||^2

where ``mu_l``/``var_l`` are batch statistics of the post-block [CLS] feature of
layer ``l``. SGD then updates every LayerNorm affine (``lr_norm``), the
embedding-level [CLS] bias ``delta`` (``lr_delta``) and the per-layer [CLS]
biases of the shallow layers ``0..budget-1`` (``lr_delta_layers``).
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterable, Iterator

import numpy as np

from . import numerics as nx
from .container import read_arrays, write_arrays
from .tokenagg import MergeConfig
from .vit import ConfigError, ForwardTrace, StateError, ViTParams, forward_calls, model_backward, model_forward, norm_param_names

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


class ContractError(ValueError):
    pass


class AdaptationDiverged(RuntimeError):
    def __init__(self, record: "MetricsRecord"):
        super().__init__(f"non-finite loss/update at batch {record.batch}; state rolled back")
        self.record = record


class DegenerateRangeError(ZeroDivisionError):
    pass


@dataclass(frozen=True)
class TTAConfig:
    lr_norm: float = 5e-3
    lr_delta: float = 1e-3
    lr_delta_layers: float = 1e-2
    momentum: float = 0.9
    lam: float = 30.0
    batch_size: int = 64
    r: int = 4
    budget: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if min(self.lr_norm, self.lr_delta, self.lr_delta_layers) < 0:
            raise ConfigError("learning rates must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.budget < 0 or self.r < 0:
            raise ConfigError("batch_size >= 1, budget >= 0 and r >= 0 required")

    @property
    def merge(self) -> MergeConfig:
        return MergeConfig(self.r)

    def check_model(self, num_layers: int) -> None:
        if self.budget > num_layers:
            raise ConfigError(f"budget {self.budget} exceeds {num_layers} layers")


def select_augmentation_layers(num_layers: int, budget: int) -> tuple[int, ...]:
    """Shallowest ``budget`` layers.

    A bias at layer ``l`` influences the ``num_layers - l`` layers after it, so
    with equal per-layer gain the budgeted subset maximising total influence is
    ``{0, ..., budget-1}``.
    """
    if budget < 0 or budget > num_layers:
        raise ConfigError(f"budget must lie in [0, {num_layers}], got {budget}")
    return tuple(range(budget))


# -----------------------------------------------------------------------------
# state
# -----------------------------------------------------------------------------


@dataclass
class AdaptState:
    delta: np.ndarray
    delta_layers: dict[int, np.ndarray]
    norms: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray]
    initial_norms: dict[str, np.ndarray] = field(repr=False)
    step: int = 0

    @classmethod
    def create(cls, params: ViTParams, budget: int, layers: Iterable[int] | None = None) -> "AdaptState":
        """Fresh state: zero biases, live copies of the pre-trained LayerNorm affines.

        ``layers`` overrides the shallow-layer rule and exists only for
        layer-selection ablations.
        """
        cfg = params.config
        if layers is None:
            layers = select_augmentation_layers(cfg.num_layers, budget)
        else:
            layers = tuple(sorted(set(layers)))
            if any(l < 0 or l >= cfg.num_layers for l in layers):
                raise ConfigError(f"augmented layers {layers} outside 0..{cfg.num_layers - 1}")
        dtype = params["cls"].dtype
        d = cfg.hidden_dim
        norms = {n: params[n].copy() for n in norm_param_names(cfg)}
        state = cls(
            delta=np.zeros(d, dtype),
            delta_layers={l: np.zeros(d, dtype) for l in layers},
            norms=norms,
            momentum={},
            initial_norms={n: v.copy() for n, v in norms.items()},
        )
        state.momentum = {n: np.zeros_like(t) for n, t in state.tunables().items()}
        return state

    @property
    def aug_layers(self) -> tuple[int, ...]:
        return tuple(sorted(self.delta_layers))

    def tunables(self) -> dict[str, np.ndarray]:
        out = dict(self.norms)
        out["delta"] = self.delta
        for l, t in self.delta_layers.items():
            out[f"delta.{l}"] = t
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        snap = {n: t.copy() for n, t in self.tunables().items()}
        snap.update({"m:" + n: b.copy() for n, b in self.momentum.items()})
        return snap

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for n, t in self.tunables().items():
            t[...] = snap[n]
        for n, b in self.momentum.items():
            b[...] = snap["m:" + n]


def reset_state(state: AdaptState) -> AdaptState:
    """Zero the biases and momenta and restore the pre-trained LayerNorm affines."""
    state.delta[...] = 0
    for t in state.delta_layers.values():
        t[...] = 0
    for n, t in state.norms.items():
        t[...] = state.initial_norms[n]
    for b in state.momentum.values():
        b[...] = 0
    state.step = 0
    return state


# -----------------------------------------------------------------------------
# source statistics
# -----------------------------------------------------------------------------


@dataclass
class SourceStats:
    mean: np.ndarray  # [L, d]
    var: np.ndarray  # [L, d]
    count: int

    @property
    def num_layers(self) -> int:
        return self.mean.shape[0]

    def save(self, path) -> None:
        write_arrays(path, {"mean": self.mean, "var": self.var}, "source_stats", {"count": self.count})

    @classmethod
    def load(cls, path) -> "SourceStats":
        manifest, arrays = read_arrays(path, "source_stats")
        return cls(arrays["mean"].astype(nx.DTYPE), arrays["var"].astype(nx.DTYPE), int(manifest["meta"]["count"]))


def compute_source_stats(
    params: ViTParams, images: np.ndarray, merge: MergeConfig | None = None, batch_size: int = 64
) -> SourceStats:
    """Per-layer mean and population variance of [CLS] features of the frozen model."""
    if len(images) < 2:
        raise DataError("source statistics need at least two images")
    feats = [[] for _ in range(params.config.num_layers)]
    for i in range(0, len(images), batch_size):
        trace = model_forward(images[i:i + batch_size], params, None, merge)
        for l, f in enumerate(trace.cls_features):
            feats[l].append(f.astype(np.float64))
    stacked = np.stack([np.concatenate(f) for f in feats])  # [L, n, d]
    mean = stacked.mean(axis=1)
    var = ((stacked - mean[:, None]) ** 2).mean(axis=1)
    return SourceStats(mean.astype(nx.DTYPE), var.astype(nx.DTYPE), len(images))


# -----------------------------------------------------------------------------
# loss terms
# -----------------------------------------------------------------------------


def entropy_term(probs: np.ndarray) -> float:
    """Mean Shannon entropy (nats) of the rows of ``probs``; ``0 log 0 = 0``."""
    probs = np.asarray(probs, dtype=np.float64)
    if np.any(np.abs(probs.sum(axis=-1) - 1) > 1e-4) or np.any(probs < 0):
        raise ContractError("rows of probs must be distributions")
    safe = np.where(probs > 0, probs, 1.0)
    return float(-(probs * np.log(safe)).sum(axis=-1).mean())


def entropy_from_logits(logits: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax entropy and its gradient with respect to ``logits``."""
    logp = nx.log_softmax(logits)
    p = np.exp(logp)
    h = -(p * logp).sum(axis=-1, keepdims=True)
    grad = -p * (logp + h) / logits.shape[0]
    return float(h.mean()), grad


def discrepancy_term(features, stats: SourceStats) -> tuple[float, list[np.ndarray]]:
    """Feature-statistics alignment term and its gradient per layer.

    ``features`` is a :class:`ForwardTrace` or a list of ``[B, d]`` arrays.
    """
    feats = features.cls_features if isinstance(features, ForwardTrace) else list(features)
    if len(feats) != stats.num_layers:
        raise StateError(f"{len(feats)} feature layers vs {stats.num_layers} in source stats")
    total, grads = 0.0, []
    for l, f in enumerate(feats):
        b = f.shape[0]
        mu = f.mean(axis=0)
        xc = f - mu
        var = (xc * xc).mean(axis=0)
        dmu = mu - stats.mean[l]
        dvar = var - stats.var[l]
        total += float((dmu * dmu).sum() + (dvar * dvar).sum())
        grads.append(((2.0 / b) * dmu + (4.0 / b) * dvar * xc).astype(f.dtype))
    return total, grads


# -----------------------------------------------------------------------------
# adaptation step
# -----------------------------------------------------------------------------


@dataclass
class MetricsRecord:
    batch: int
    accuracy: float | None
    entropy: float
    discrepancy: float
    loss: float
    forward_passes: int
    wall_clock: float = 0.0
    status: str = "ok"

    def as_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("wall_clock")
        return d


def _learning_rate(name: str, cfg: TTAConfig) -> float:
    if name == "delta":
        return cfg.lr_delta
    if name.startswith("delta."):
        return cfg.lr_delta_layers
    return cfg.lr_norm


def _all_finite(arrays) -> bool:
    return all(np.isfinite(a).all() for a in arrays)


def tta_step(
    images: np.ndarray,
    params: ViTParams,
    state: AdaptState,
    stats: SourceStats,
    config: TTAConfig,
    labels: np.ndarray | None = None,
    batch_index: int = 0,
) -> tuple[np.ndarray, MetricsRecord, AdaptState]:
    """Predict one batch, then take one SGD step on it (continual; ``state`` is mutated)."""
    config.check_model(params.config.num_layers)
    t0 = time.perf_counter()
    calls0 = forward_calls.count

    trace = model_forward(images, params, state, config.merge)
    preds = trace.logits.argmax(axis=-1)
    ent, g_logits = entropy_from_logits(trace.logits)
    if config.lam:
        disc, g_cls = discrepancy_term(trace, stats)
        g_cls = [config.lam * g for g in g_cls]
    else:
        disc, g_cls = 0.0, None
    loss = ent + config.lam * disc
    acc = None if labels is None else float((preds == labels).mean())
    record = MetricsRecord(batch_index, acc, ent, disc, loss, forward_calls.count - calls0)

    if not math.isfinite(loss):
        record.status = "diverged"
        record.wall_clock = time.perf_counter() - t0
        raise AdaptationDiverged(record)

    snap = state.snapshot()
    # overflow is detected right below and rolled back, so silence numpy here
    with np.errstate(over="ignore", invalid="ignore"):
        grads = model_backward(trace, g_logits.astype(trace.logits.dtype), params, state, grad_cls=g_cls)
        for name, tensor in state.tunables().items():
            lr = _learning_rate(name, config)
            if lr:
                nx.sgd_step(tensor, grads[name], state.momentum[name], lr, config.momentum)
    if not _all_finite(state.tunables().values()):
        state.restore(snap)
        record.status = "diverged"
        record.wall_clock = time.perf_counter() - t0
        raise AdaptationDiverged(record)
    state.step += 1
    record.wall_clock = time.perf_counter() - t0
    return preds, record, state


def batches(images: np.ndarray, labels: np.ndarray | None, batch_size: int) -> Iterator[tuple[np.ndarray, np.ndarray | None]]:
    for i in range(0, len(images), batch_size):
        yield images[i:i + batch_size], None if labels is None else labels[i:i + batch_size]


@dataclass
class StreamSummary:
    accuracy: float
    mean_entropy: float
    num_batches: int
    forward_passes: int
    wall_clock: float
    records: list[MetricsRecord]


def evaluate_stream(
    stream: Iterable[tuple[np.ndarray, np.ndarray | None]],
    params: ViTParams,
    state: AdaptState,
    stats: SourceStats,
    config: TTAConfig,
) -> StreamSummary:
    """Run :func:`tta_step` over every batch; accuracy is of pre-update predictions."""
    records, correct, seen = [], 0, 0
    for i, (images, labels) in enumerate(stream):
        preds, rec, state = tta_step(images, params, state, stats, config, labels, i)
        records.append(rec)
        if labels is not None:
            correct += int((preds == labels).sum())
            seen += len(labels)
    return StreamSummary(
        accuracy=correct / seen if seen else float("nan"),
        mean_entropy=float(np.mean([r.entropy for r in records])) if records else float("nan"),
        num_batches=len(records),
        forward_passes=sum(r.forward_passes for r in records),
        wall_clock=sum(r.wall_clock for r in records),
        records=records,
    )


def evaluate_frozen(images: np.ndarray, labels: np.ndarray, params: ViTParams, merge: MergeConfig | None = None,
                    batch_size: int = 64) -> float:
    """Accuracy of the un-adapted model."""
    correct = 0
    for x, y in batches(images, labels, batch_size):
        correct += int((model_forward(x, params, None, merge).logits.argmax(-1) == y).sum())
    return correct / len(labels)


def relative_accuracy(a_act: float, a_min: float, a_max: float) -> float:
    if a_max == a_min:
        raise DegenerateRangeError("a_max == a_min")
    return (a_act - a_min) / (a_max - a_min)


# -----------------------------------------------------------------------------
# hyperparameter selection
# -----------------------------------------------------------------------------

DELTA_LRS = (8e-4, 1e-3, 3e-3)
DELTA_LAYER_LRS = (1e-2, 5e-2)
BUDGETS = (4, 5, 6)


def heldout_loss(params: ViTParams, state: AdaptState, stats: SourceStats, images: np.ndarray, config: TTAConfig) -> float:
    """Mean TTA objective of ``state`` on ``images`` (forward only)."""
    losses = []
    for x, _ in batches(images, None, config.batch_size):
        trace = model_forward(x, params, state, config.merge)
        ent, _ = entropy_from_logits(trace.logits)
        disc, _ = discrepancy_term(trace, stats) if config.lam else (0.0, None)
        losses.append(ent + config.lam * disc)
    return float(np.mean(losses))


def select_hyperparameters(
    params: ViTParams,
    stats: SourceStats,
    images: np.ndarray,
    base: TTAConfig,
    lr_deltas=DELTA_LRS,
    lr_delta_layers=DELTA_LAYER_LRS,
    budgets=BUDGETS,
) -> tuple[TTAConfig, list[tuple[TTAConfig, float]]]:
    """Grid search scored by the adaptation objective after one pass over ``images``."""
    # shallow models cannot host large budgets; clamp them to the depth
    budgets = sorted({min(b, params.config.num_layers) for b in budgets})
    table = []
    for lr_d, lr_dl, bud in itertools.product(lr_deltas, lr_delta_layers, budgets):
        cfg = replace(base, lr_delta=lr_d, lr_delta_layers=lr_dl, budget=bud)
        state = AdaptState.create(params, bud)
        try:
            for x, _ in batches(images, None, cfg.batch_size):
                tta_step(x, params, state, stats, cfg)
            score = heldout_loss(params, state, stats, images, cfg)
        except AdaptationDiverged:
            score = math.inf
        table.append((cfg, score))
        log.debug("grid lr_delta=%g lr_delta_layers=%g budget=%d -> %.6f", lr_d, lr_dl, bud, score)
    best = min(table, key=lambda t: t[1])[0]
    return best, table


def config_from_dict(d: dict) -> TTAConfig:
    known = {f.name for f in fields(TTAConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown TTA config keys: {sorted(unknown)}")
    return TTAConfig(**d)
