"""Source-domain pre-training of the tiny ViT (AdamW, warmup + cosine decay)."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .vit import ConfigError, ViTConfig, ViTParams, init_params, model_backward, model_forward

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Pre-training did not reach its accuracy target."""

    def __init__(self, msg: str, history: list[dict]):
        super().__init__(msg)
        self.history = history


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 2e-3
    min_lr: float = 1e-5
    warmup_steps: int = 200
    weight_decay: float = 0.05
    clip_norm: float = 1.0
    target_accuracy: float = 0.95
    flip: bool = True  # random h/v flips; label preserving for every synthetic class
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr <= 0 or self.min_lr < 0 or self.min_lr > self.lr:
            raise ConfigError("need 0 <= min_lr <= lr and lr > 0")


@dataclass
class TrainResult:
    params: ViTParams
    history: list[dict] = field(default_factory=list)
    train_accuracy: float = 0.0

    def log_lines(self) -> str:
        return "".join(json.dumps(h, sort_keys=True) + "\n" for h in self.history)


def lr_at(step: int, total: int, cfg: TrainConfig) -> float:
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / max(1, total - cfg.warmup_steps)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1 + math.cos(math.pi * min(frac, 1.0)))


def _decays(name: str, shape: tuple) -> bool:
    # matrices only; norms, biases, cls and positions are left alone
    return len(shape) == 2 and name != "pos"


def random_flips(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Flip each image horizontally and vertically with probability 1/2."""
    fh, fv = rng.random(len(x)) < 0.5, rng.random(len(x)) < 0.5
    x = np.where(fh[:, None, None, None], x[..., ::-1], x)
    return np.ascontiguousarray(np.where(fv[:, None, None, None], x[..., ::-1, :], x))


def accuracy(params: ViTParams, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    correct = 0
    for i in range(0, len(images), batch_size):
        logits = model_forward(images[i:i + batch_size], params).logits
        correct += int((logits.argmax(-1) == labels[i:i + batch_size]).sum())
    return correct / len(labels)


def pretrain(
    images: np.ndarray,
    labels: np.ndarray,
    model: ViTConfig,
    cfg: TrainConfig,
    params: ViTParams | None = None,
) -> TrainResult:
    """Train all weights with cross-entropy; raises :class:`TrainingDiverged` below target."""
    if len(images) != len(labels) or len(images) == 0:
        raise ValueError("images and labels must be non-empty and aligned")
    params = init_params(model, cfg.seed) if params is None else params.copy()
    rng = np.random.default_rng(cfg.seed)
    m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    v = {k: np.zeros_like(t) for k, t in params.tensors.items()}
    steps_per_epoch = math.ceil(len(images) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    step, history = 0, []

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(images))
        loss_sum, correct = 0.0, 0
        for i in range(0, len(images), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            x, y = images[idx], labels[idx]
            if cfg.flip:
                x = random_flips(x, rng)
            trace = model_forward(x, params)
            loss, ce_cache = nx.cross_entropy(trace.logits, y)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {step}", history)
            g = nx.cross_entropy_backward(1.0, ce_cache).astype(trace.logits.dtype)
            grads = model_backward(trace, g, params, full=True)
            gnorm = math.sqrt(sum(float((gr.astype(np.float64) ** 2).sum()) for gr in grads.values()))
            scale = min(1.0, cfg.clip_norm / (gnorm + 1e-12))
            lr = lr_at(step, total, cfg)
            step += 1
            for name, p in params.tensors.items():
                gr = grads[name] * scale if scale < 1.0 else grads[name]
                wd = cfg.weight_decay if _decays(name, p.shape) else 0.0
                nx.adam_step(p, gr, m[name], v[name], step, lr, weight_decay=wd)
            loss_sum += loss * len(idx)
            correct += int((trace.logits.argmax(-1) == y).sum())
        rec = {"epoch": epoch, "loss": loss_sum / len(images), "train_accuracy": correct / len(images),
               "lr": lr_at(step - 1, total, cfg)}
        history.append(rec)
        log.info("epoch %d loss %.4f acc %.4f", epoch, rec["loss"], rec["train_accuracy"])

    result = TrainResult(params, history, accuracy(params, images, labels))
    history.append({"final_train_accuracy": result.train_accuracy})
    if result.train_accuracy < cfg.target_accuracy:
        raise TrainingDiverged(
            f"train accuracy {result.train_accuracy:.4f} below target {cfg.target_accuracy} "
            f"after {cfg.epochs} epochs", history)
    return result


def train_config_from_dict(d: dict) -> TrainConfig:
    known = set(asdict(TrainConfig()))
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
    return TrainConfig(**d)
