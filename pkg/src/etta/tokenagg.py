"""ToMe-style token aggregation.

Image tokens (sequence positions ``1..N-1``; position 0 is [CLS]) are split
alternately into destination (even image index) and source (odd image index)
sets. Each source is matched to its most similar destination by key cosine
similarity and the ``r`` best-matched sources are folded into their
destinations by size-weighted averaging.

Plans are batched: ``src``/``dst`` hold one row of sequence indices per sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import OpCache


class ScheduleError(ValueError):
    """Requested reduction exceeds what a layer can merge."""


class PlanError(ValueError):
    """Merge plan is inconsistent with the token batch."""


@dataclass(frozen=True)
class MergeConfig:
    r: int = 0

    def __post_init__(self):
        if self.r < 0:
            raise ScheduleError("r must be >= 0")

    @property
    def active(self) -> bool:
        return self.r > 0


@dataclass(frozen=True)
class MergePlan:
    src: np.ndarray  # [B, r] sequence indices, ascending per row
    dst: np.ndarray  # [B, r]
    layer_idx: int = -1

    @property
    def r(self) -> int:
        return self.src.shape[1]

    @property
    def batch(self) -> int:
        return self.src.shape[0]


def max_reduction(n_tokens: int) -> int:
    """Largest r a layer with ``n_tokens`` (incl. [CLS]) can merge."""
    return (n_tokens - 1) // 2


def merge_schedule(n_tokens: int, num_layers: int, r: int) -> list[int]:
    """Per-layer reductions for a constant-r schedule.

    Each layer removes ``r`` tokens, clamped to what it can still merge
    (``floor((N_l - 1) / 2)``); once a single image token is left the count
    stays constant. Clamping keeps token counts, and hence cost, monotone in r.
    """
    if r < 0:
        raise ScheduleError("r must be >= 0")
    if r > max_reduction(n_tokens):
        raise ScheduleError(f"r={r} exceeds floor((N-1)/2)={max_reduction(n_tokens)} at layer 0")
    out = []
    n = n_tokens
    for _ in range(num_layers):
        r_l = min(r, max_reduction(n))
        out.append(r_l)
        n -= r_l
    return out


def similarity_scores(keys: np.ndarray) -> np.ndarray:
    """Cosine similarity between source and destination image tokens.

    ``keys`` is ``[B, N, c]`` including the [CLS] row, which is dropped.
    Returns ``[B, n_src, n_dst]``. Zero-norm keys score -1 against everything.
    """
    img = keys[:, 1:]
    norms = np.linalg.norm(img, axis=-1, keepdims=True)
    zero = norms[..., 0] == 0
    unit = img / np.where(norms == 0, 1, norms)
    dst, src = unit[:, 0::2], unit[:, 1::2]
    scores = src @ np.swapaxes(dst, -1, -2)
    dead = zero[:, 1::2][:, :, None] | zero[:, 0::2][:, None, :]
    if dead.any():
        scores = np.where(dead, np.asarray(-1, scores.dtype), scores)
    return scores


def bipartite_soft_matching(scores: np.ndarray, r: int, layer_idx: int = -1) -> MergePlan:
    """Pick the ``r`` sources with the strongest best edge.

    Ties go to the lower index, both when choosing a source's destination and
    when ranking sources. Indices in the plan are sequence positions.
    """
    batch, n_src, _ = scores.shape
    if r > n_src:
        raise ScheduleError(f"r={r} exceeds {n_src} source candidates")
    if r == 0:
        empty = np.zeros((batch, 0), dtype=np.int64)
        return MergePlan(empty, empty.copy(), layer_idx)
    best_dst = scores.argmax(axis=-1)
    best_val = np.take_along_axis(scores, best_dst[..., None], axis=-1)[..., 0]
    order = np.argsort(-best_val, axis=-1, kind="stable")[:, :r]
    order.sort(axis=-1)
    chosen_dst = np.take_along_axis(best_dst, order, axis=-1)
    # image index 2j+1 (src) / 2j (dst) -> sequence index +1
    return MergePlan(src=2 * order + 2, dst=2 * chosen_dst + 1, layer_idx=layer_idx)


def _check_plan(plan: MergePlan, batch: int, n: int) -> None:
    if plan.batch != batch:
        raise PlanError(f"plan has {plan.batch} rows, batch has {batch}")
    if plan.r == 0:
        return
    if plan.src.min() < 1 or plan.dst.min() < 1 or plan.src.max() >= n or plan.dst.max() >= n:
        raise PlanError(f"plan index outside image tokens 1..{n - 1}")


def apply_merge(
    tokens: np.ndarray, sizes: np.ndarray, plan: MergePlan
) -> tuple[np.ndarray, np.ndarray, OpCache]:
    """Fold each source row into its destination by size-weighted mean."""
    batch, n, d = tokens.shape
    _check_plan(plan, batch, n)
    if plan.r == 0:
        return tokens, sizes, OpCache("merge", (None,))
    r = plan.r
    rows = np.arange(batch)[:, None]
    new_sizes = sizes.copy()
    np.add.at(new_sizes, (rows, plan.dst), sizes[rows, plan.src])
    weighted = tokens * sizes[..., None]
    np.add.at(weighted, (rows, plan.dst), weighted[rows, plan.src])
    touched = np.zeros((batch, n), dtype=bool)
    touched[rows, plan.dst] = True
    merged = np.where(touched[..., None], weighted / new_sizes[..., None], tokens)

    keep_mask = np.ones((batch, n), dtype=bool)
    keep_mask[rows, plan.src] = False
    keep = np.nonzero(keep_mask)[1].reshape(batch, n - r)
    out = np.take_along_axis(merged, keep[..., None], axis=1)
    out_sizes = np.take_along_axis(new_sizes, keep, axis=1)
    return out, out_sizes, OpCache("merge", (plan, sizes, new_sizes, keep, touched))


def apply_merge_backward(grad: np.ndarray, cache: OpCache) -> np.ndarray:
    saved = cache.expect("merge")
    if saved[0] is None:
        return grad
    plan, sizes, new_sizes, keep, touched = saved
    batch, n = touched.shape
    rows = np.arange(batch)[:, None]
    g_full = np.zeros((batch, n, grad.shape[-1]), dtype=grad.dtype)
    g_full[rows, keep] = grad
    g_w = g_full / new_sizes[..., None]
    g_w[rows, plan.src] = g_w[rows, plan.dst]
    mixed = touched.copy()
    mixed[rows, plan.src] = True
    return np.where(mixed[..., None], g_w * sizes[..., None], g_full)


def materialize_P(plan: MergePlan, n_tokens: int, sizes: np.ndarray | None = None, row: int = 0) -> np.ndarray:
    """Dense ``[n_tokens - r, n_tokens]`` aggregation matrix for batch row ``row``.

    ``P @ tokens[row]`` reproduces ``apply_merge`` (the [CLS] row is the unit row).
    """
    s = np.ones(n_tokens) if sizes is None else np.asarray(sizes[row], dtype=np.float64)
    src = plan.src[row] if plan.r else np.zeros(0, dtype=np.int64)
    dst = plan.dst[row] if plan.r else np.zeros(0, dtype=np.int64)
    full = np.eye(n_tokens)
    for j, i in zip(src, dst):
        full[i, j] = 1.0
    full *= s[None, :]
    full /= full.sum(axis=1, keepdims=True)
    keep = np.setdiff1d(np.arange(n_tokens), src)
    return full[keep]


def merge_block_tokens(
    tokens: np.ndarray, sizes: np.ndarray, keys: np.ndarray, r: int, layer_idx: int = -1
) -> tuple[np.ndarray, np.ndarray, MergePlan, OpCache]:
    """Score, match and merge in one call (plan treated as a constant for gradients)."""
    if r > max_reduction(tokens.shape[1]):
        raise ScheduleError(
            f"layer {layer_idx}: r={r} exceeds floor((N-1)/2)={max_reduction(tokens.shape[1])}"
        )
    plan = bipartite_soft_matching(similarity_scores(keys), r, layer_idx)
    out, out_sizes, cache = apply_merge(tokens, sizes, plan)
    return out, out_sizes, plan, cache
