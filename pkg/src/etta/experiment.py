"""Corrupted test streams, method definitions and the parallel run driver.

A *task* is one (method, seed, corruption) stream. Tasks are independent: the
adaptation state is reset at the start of each corruption, so they can be
spread over ``ETTA_THREADS`` worker processes. Each worker pins its BLAS pool
to one thread and results are collected in task order, which keeps the
metrics stream byte-identical for any worker count.
"""

from __future__ import annotations

import functools
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from threadpoolctl import threadpool_limits

from .adapt import AdaptState, SourceStats, TTAConfig, batches, entropy_from_logits, discrepancy_term, evaluate_stream
from .data import CATEGORY, HELDOUT, STREAM, corrupt_batch, gen_dataset
from .flops import count_flops
from .vit import ConfigError, ViTParams, forward_calls, model_forward


def worker_count() -> int:
    raw = os.environ.get("ETTA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ETTA_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("ETTA_THREADS must be >= 1")
    return n


# -----------------------------------------------------------------------------
# methods
# -----------------------------------------------------------------------------


def deep_layers(num_layers: int, budget: int) -> tuple[int, ...]:
    return tuple(range(num_layers - budget, num_layers))


def uniform_layers(num_layers: int, budget: int) -> tuple[int, ...]:
    if budget == 0:
        return ()
    return tuple(sorted({(i * num_layers) // budget for i in range(budget)}))


def method_setup(method: str, base: TTAConfig, num_layers: int) -> tuple[TTAConfig, tuple[int, ...] | None]:
    """TTA config and optional explicit augmented-layer set for a named method."""
    if method == "noadapt":
        return replace(base, r=0, lr_norm=0.0, lr_delta=0.0, lr_delta_layers=0.0, budget=0), None
    if method == "merge_only":
        return replace(base, lr_delta=0.0, lr_delta_layers=0.0, budget=0), None
    if method == "navia":
        return base, None
    if method == "navia_r0":
        return replace(base, r=0), None
    if method == "navia_deep":
        return base, deep_layers(num_layers, base.budget)
    if method == "navia_uniform":
        return base, uniform_layers(num_layers, base.budget)
    raise ConfigError(f"unknown method {method!r}")


# -----------------------------------------------------------------------------
# streams
# -----------------------------------------------------------------------------


@functools.lru_cache(maxsize=4)
def clean_test_set(n: int, seed: int, image_size: int = 32, channels: int = 3, num_classes: int = 10,
                   purpose: int = STREAM):
    """Clean images shared by every corruption of a seed (cached, returned read-only)."""
    per_class = -(-n // num_classes)
    x, y = gen_dataset(per_class, image_size, channels, seed=(seed, purpose), num_classes=num_classes)
    x, y = x[:n], y[:n]
    x.flags.writeable = y.flags.writeable = False
    return x, y


def corrupted_stream(kind: str, severity: int, n: int, seed: int, image_size: int = 32, channels: int = 3,
                     num_classes: int = 10, purpose: int = STREAM) -> tuple[np.ndarray, np.ndarray]:
    x, y = clean_test_set(n, seed, image_size, channels, num_classes, purpose)
    return corrupt_batch(x, kind, severity, seed * 8 + purpose), y


def heldout_target_set(corruptions, severity: int, n: int, seed: int, **kw) -> np.ndarray:
    """Unlabelled mixture of all corruptions, disjoint from the evaluation streams."""
    per = -(-n // len(corruptions))
    parts = [corrupted_stream(k, severity, per, seed, purpose=HELDOUT, **kw)[0] for k in corruptions]
    mixed = np.concatenate(parts)
    order = np.random.default_rng(seed).permutation(len(mixed))
    return mixed[order][:n]


# -----------------------------------------------------------------------------
# tasks
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class Task:
    method: str
    seed: int
    corruption: str
    severity: int
    images: int
    tta: TTAConfig


@dataclass
class TaskResult:
    task: Task
    accuracy: float
    mean_entropy: float
    forward_passes: int
    wall_clock: float
    records: list[dict]


def _frozen_stream(stream, params: ViTParams, stats: SourceStats, cfg: TTAConfig):
    """No-adaptation baseline: same metrics as a TTA step, forward pass only."""
    records, correct, seen = [], 0, 0
    for i, (x, y) in enumerate(stream):
        calls0 = forward_calls.count
        trace = model_forward(x, params, None, cfg.merge)
        preds = trace.logits.argmax(-1)
        ent, _ = entropy_from_logits(trace.logits)
        disc, _ = discrepancy_term(trace, stats)
        acc = float((preds == y).mean())
        records.append({"batch": i, "accuracy": acc, "entropy": ent, "discrepancy": disc,
                        "loss": ent + cfg.lam * disc, "forward_passes": forward_calls.count - calls0,
                        "status": "ok"})
        correct += int((preds == y).sum())
        seen += len(y)
    return correct / seen, records


def run_task(task: Task, params: ViTParams, stats: dict[int, SourceStats]) -> TaskResult:
    cfg, layers = method_setup(task.method, task.tta, params.config.num_layers)
    c = params.config
    x, y = corrupted_stream(task.corruption, task.severity, task.images, task.seed,
                            c.image_size, c.channels, c.num_classes)
    st = stats[cfg.r]
    t0 = time.perf_counter()
    if task.method == "noadapt":
        acc, records = _frozen_stream(batches(x, y, cfg.batch_size), params, st, cfg)
        fwd = len(records)
    else:
        state = AdaptState.create(params, cfg.budget, layers)
        summary = evaluate_stream(batches(x, y, cfg.batch_size), params, state, st, cfg)
        acc, fwd = summary.accuracy, summary.forward_passes
        records = [r.as_dict(timing=False) for r in summary.records]
    wall = time.perf_counter() - t0
    mean_ent = float(np.mean([r["entropy"] for r in records]))
    head = {"method": task.method, "seed": task.seed, "corruption": task.corruption}
    return TaskResult(task, acc, mean_ent, fwd, wall, [{**head, **r} for r in records])


def _worker(args):
    task, params, stats = args
    with threadpool_limits(1):
        return run_task(task, params, stats)


def run_tasks(tasks: list[Task], params: ViTParams, stats: dict[int, SourceStats],
              workers: int | None = None) -> list[TaskResult]:
    workers = worker_count() if workers is None else workers
    jobs = [(t, params, stats) for t in tasks]
    if workers == 1 or len(tasks) <= 1:
        return [_worker(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_worker, jobs))


def make_tasks(methods, seeds, corruptions, severity: int, images: int, tta: TTAConfig) -> list[Task]:
    return [Task(m, s, c, severity, images, tta) for m in methods for s in seeds for c in corruptions]


# -----------------------------------------------------------------------------
# outputs
# -----------------------------------------------------------------------------


def metrics_jsonl(results: list[TaskResult]) -> str:
    lines = []
    for res in results:
        for rec in res.records:
            lines.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))
    return "\n".join(lines) + "\n"


SUMMARY_FIELDS = ("method", "seed", "corruption", "category", "accuracy", "mean_entropy",
                  "forward_passes", "wall_clock", "r", "gflops", "flops_ratio")


def summary_rows(results: list[TaskResult], params: ViTParams) -> list[dict]:
    rows = []
    for res in results:
        cfg, _ = method_setup(res.task.method, res.task.tta, params.config.num_layers)
        fl = count_flops(params.config, cfg.r)
        rows.append({
            "method": res.task.method,
            "seed": res.task.seed,
            "corruption": res.task.corruption,
            "category": CATEGORY[res.task.corruption],
            "accuracy": res.accuracy,
            "mean_entropy": res.mean_entropy,
            "forward_passes": res.forward_passes,
            "wall_clock": round(res.wall_clock, 3),
            "r": cfg.r,
            "gflops": fl.gflops,
            "flops_ratio": fl.ratio,
        })
    return rows


def mean_accuracy(results: list[TaskResult], method: str) -> float:
    """Seed-averaged mean accuracy over corruptions."""
    accs = [r.accuracy for r in results if r.task.method == method]
    if not accs:
        raise KeyError(method)
    return float(np.mean(accs))
