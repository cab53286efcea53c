"""Pre-norm Vision Transformer with token merging and manual backward.

Each block computes ``x += MHSA(LN1(x))``, optionally merges tokens, then
``x += FFN(LN2(x))``. Test-time augmentation enters as additive biases on
the [CLS] row: ``delta`` at the embedding and ``delta_layers[l]`` at the input
of block ``l``. LayerNorm affines are read from the adapt state when it
carries live copies, otherwise from the frozen parameters.

``adapt_state`` arguments are duck-typed: anything with ``delta``,
``delta_layers`` and ``norms`` attributes (see :class:`etta.adapt.AdaptState`).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from . import numerics as nx
from .container import FormatError, read_arrays, write_arrays
from .tokenagg import MergeConfig, MergePlan, apply_merge_backward, merge_block_tokens, merge_schedule


class ConfigError(ValueError):
    pass


class StateError(RuntimeError):
    pass


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    hidden_dim: int = 64
    num_layers: int = 8
    num_heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 10
    ln_eps: float = nx.LN_EPS

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.hidden_dim % self.num_heads:
            raise ConfigError("hidden_dim must be divisible by num_heads")
        if min(self.image_size, self.patch_size, self.channels, self.hidden_dim,
               self.num_layers, self.num_heads, self.mlp_ratio, self.num_classes) < 1:
            raise ConfigError("all ViT dimensions must be >= 1")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def mlp_dim(self) -> int:
        return self.hidden_dim * self.mlp_ratio

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ViTConfig) -> dict[str, tuple[int, ...]]:
    d, m = cfg.hidden_dim, cfg.mlp_dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch_w": (cfg.patch_dim, d),
        "patch_b": (d,),
        "pos": (cfg.num_tokens, d),
        "cls": (d,),
    }
    for l in range(cfg.num_layers):
        p = f"blocks.{l}."
        shapes.update({
            p + "ln1_g": (d,), p + "ln1_b": (d,),
            p + "wq": (d, d), p + "bq": (d,),
            p + "wk": (d, d), p + "bk": (d,),
            p + "wv": (d, d), p + "bv": (d,),
            p + "wo": (d, d), p + "bo": (d,),
            p + "ln2_g": (d,), p + "ln2_b": (d,),
            p + "fc1_w": (d, m), p + "fc1_b": (m,),
            p + "fc2_w": (m, d), p + "fc2_b": (d,),
        })
    shapes.update({"norm_g": (d,), "norm_b": (d,), "head_w": (d, cfg.num_classes), "head_b": (cfg.num_classes,)})
    return shapes


def is_norm_param(name: str) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    return leaf in ("ln1_g", "ln1_b", "ln2_g", "ln2_b", "norm_g", "norm_b")


def norm_param_names(cfg: ViTConfig) -> list[str]:
    return [n for n in param_shapes(cfg) if is_norm_param(n)]


@dataclass
class ViTParams:
    config: ViTConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        shapes = param_shapes(self.config)
        if set(shapes) != set(self.tensors):
            missing = sorted(set(shapes) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(shapes))
            raise ConfigError(f"parameter set mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for name, shape in shapes.items():
            if self.tensors[name].shape != shape:
                raise ConfigError(f"{name}: shape {self.tensors[name].shape} != {shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "ViTParams":
        return ViTParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ViTParams":
        return ViTParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})


def init_params(cfg: ViTConfig, seed: int = 0) -> ViTParams:
    """Xavier-uniform matrices, truncated-normal(0.02) cls/pos, zero biases, unit LN scales."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            t = np.ones(shape)
        elif len(shape) == 1 and leaf != "cls":
            t = np.zeros(shape)
        elif len(shape) == 2 and name != "pos":
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            t = rng.uniform(-bound, bound, size=shape)
        else:
            t = np.clip(rng.standard_normal(shape), -2, 2) * 0.02
        tensors[name] = t.astype(nx.DTYPE)
    return ViTParams(cfg, tensors)


class ForwardCounter:
    """Counts full model traversals; used to audit the one-forward-per-batch protocol."""

    def __init__(self):
        self.count = 0

    def tick(self) -> None:
        self.count += 1


forward_calls = ForwardCounter()


# -----------------------------------------------------------------------------
# adapt-state accessors
# -----------------------------------------------------------------------------


def _affine(params: ViTParams, state, name: str) -> np.ndarray:
    if state is not None and name in state.norms:
        return state.norms[name]
    return params[name]


def _delta(state) -> np.ndarray | None:
    return None if state is None else state.delta


def _delta_layer(state, layer: int) -> np.ndarray | None:
    if state is None:
        return None
    return state.delta_layers.get(layer)


def _aug_layers(state) -> tuple[int, ...]:
    return () if state is None else tuple(sorted(state.delta_layers))


# -----------------------------------------------------------------------------
# embedding
# -----------------------------------------------------------------------------


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``[B, C, H, W] -> [B, (H/p)*(W/p), C*p*p]`` in row-major patch order."""
    b, c, h, w = images.shape
    x = images.reshape(b, c, h // patch, patch, w // patch, patch)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(b, (h // patch) * (w // patch), c * patch * patch)


def patch_embed(images: np.ndarray, params: ViTParams, adapt_state=None):
    """Returns ``(tokens [B, N+1, d], sizes [B, N+1], cache)``.

    Row 0 is ``cls + delta + pos[0]``; rows ``1..N`` are projected patches plus
    their positional embedding.
    """
    cfg = params.config
    if images.ndim != 4 or images.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ConfigError(
            f"images {images.shape} do not match config ({cfg.channels}, {cfg.image_size}, {cfg.image_size})"
        )
    dtype = params["cls"].dtype
    patches = patchify(images.astype(dtype, copy=False), cfg.patch_size)
    proj, lin_cache = nx.linear(patches, params["patch_w"], params["patch_b"])
    b = images.shape[0]
    tokens = np.empty((b, cfg.num_tokens, cfg.hidden_dim), dtype=dtype)
    cls = params["cls"]
    delta = _delta(adapt_state)
    if delta is not None:
        cls = cls + delta
    tokens[:, 0] = cls
    tokens[:, 1:] = proj
    tokens += params["pos"]
    sizes = np.ones((b, cfg.num_tokens), dtype=dtype)
    return tokens, sizes, nx.OpCache("patch_embed", (lin_cache,))


# -----------------------------------------------------------------------------
# encoder block
# -----------------------------------------------------------------------------


@dataclass
class BlockCache:
    layer: int
    had_delta: bool
    ln1: nx.OpCache
    qkv: nx.OpCache
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn: nx.OpCache
    proj: nx.OpCache
    merge: nx.OpCache | None
    ln2: nx.OpCache
    fc1: nx.OpCache
    act: nx.OpCache
    fc2: nx.OpCache


def block_forward(
    tokens: np.ndarray,
    sizes: np.ndarray,
    layer_idx: int,
    params: ViTParams,
    adapt_state=None,
    r: int = 0,
) -> tuple[np.ndarray, np.ndarray, MergePlan | None, BlockCache]:
    cfg = params.config
    p = f"blocks.{layer_idx}."
    b, n, d = tokens.shape
    h, dh = cfg.num_heads, cfg.head_dim

    x = tokens
    dl = _delta_layer(adapt_state, layer_idx)
    if dl is not None:
        x = tokens.copy()
        x[:, 0] += dl

    h1, ln1 = nx.layernorm(x, _affine(params, adapt_state, p + "ln1_g"), _affine(params, adapt_state, p + "ln1_b"), cfg.ln_eps)
    wqkv = np.concatenate([params[p + "wq"], params[p + "wk"], params[p + "wv"]], axis=1)
    bqkv = np.concatenate([params[p + "bq"], params[p + "bk"], params[p + "bv"]])
    qkv, qkv_cache = nx.linear(h1, wqkv, bqkv)
    qkv = qkv.reshape(b, n, 3, h, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]

    scores = q @ k.swapaxes(-1, -2)
    scores *= 1.0 / math.sqrt(dh)
    if r > 0:
        # proportional attention: merged tokens keep their aggregate weight
        scores += np.log(sizes)[:, None, None, :]
    attn, attn_cache = nx.softmax(scores, inplace=True)
    o = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    a_out, proj_cache = nx.linear(o, params[p + "wo"], params[p + "bo"])
    x = x + a_out

    plan, merge_cache = None, None
    if r > 0:
        x, sizes, plan, merge_cache = merge_block_tokens(x, sizes, k.mean(axis=1), r, layer_idx)

    h2, ln2 = nx.layernorm(x, _affine(params, adapt_state, p + "ln2_g"), _affine(params, adapt_state, p + "ln2_b"), cfg.ln_eps)
    u, fc1 = nx.linear(h2, params[p + "fc1_w"], params[p + "fc1_b"])
    g, act = nx.gelu(u)
    f, fc2 = nx.linear(g, params[p + "fc2_w"], params[p + "fc2_b"])
    x = x + f
    cache = BlockCache(layer_idx, dl is not None, ln1, qkv_cache, q, k, v, attn_cache,
                       proj_cache, merge_cache, ln2, fc1, act, fc2)
    return x, sizes, plan, cache


def block_backward(
    grad: np.ndarray, cache: BlockCache, params: ViTParams, full: bool = False
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Backpropagate one block.

    Returns ``(grad_input, grads)`` where ``grads`` holds the LayerNorm affines,
    ``delta.{l}`` if the layer carried a [CLS] bias, and every weight when ``full``.
    """
    cfg = params.config
    p = f"blocks.{cache.layer}."
    h, dh = cfg.num_heads, cfg.head_dim
    grads: dict[str, np.ndarray] = {}

    # FFN residual
    g_f = grad
    g_g, gw, gb = nx.linear_backward(g_f, cache.fc2, full)
    if full:
        grads[p + "fc2_w"], grads[p + "fc2_b"] = gw, gb
    g_u = nx.gelu_backward(g_g, cache.act)
    g_h2, gw, gb = nx.linear_backward(g_u, cache.fc1, full)
    if full:
        grads[p + "fc1_w"], grads[p + "fc1_b"] = gw, gb
    g_x, grads[p + "ln2_g"], grads[p + "ln2_b"] = nx.layernorm_backward(g_h2, cache.ln2)
    g_x = g_x + grad

    if cache.merge is not None:
        g_x = apply_merge_backward(g_x, cache.merge)

    # attention residual
    b, n, d = g_x.shape
    g_o, gw, gb = nx.linear_backward(g_x, cache.proj, full)
    if full:
        grads[p + "wo"], grads[p + "bo"] = gw, gb
    g_o = g_o.reshape(b, n, h, dh).transpose(0, 2, 1, 3)
    attn = cache.attn.saved[0]
    g_attn = g_o @ cache.v.swapaxes(-1, -2)
    g_v = attn.swapaxes(-1, -2) @ g_o
    g_s = nx.softmax_backward(g_attn, cache.attn, inplace=True)
    g_s *= 1.0 / math.sqrt(dh)
    g_q = g_s @ cache.k
    g_k = g_s.swapaxes(-1, -2) @ cache.q
    g_qkv = np.stack([g_q, g_k, g_v]).transpose(1, 3, 0, 2, 4).reshape(b, n, 3 * d)
    g_h1, gw, gb = nx.linear_backward(g_qkv, cache.qkv, full)
    if full:
        for i, nm in enumerate(("q", "k", "v")):
            grads[p + "w" + nm] = gw[:, i * d:(i + 1) * d]
            grads[p + "b" + nm] = gb[i * d:(i + 1) * d]
    g_in, grads[p + "ln1_g"], grads[p + "ln1_b"] = nx.layernorm_backward(g_h1, cache.ln1)
    g_in = g_in + g_x
    if cache.had_delta:
        grads[f"delta.{cache.layer}"] = g_in[:, 0].sum(axis=0)
    return g_in, grads


# -----------------------------------------------------------------------------
# whole model
# -----------------------------------------------------------------------------


@dataclass
class ForwardTrace:
    config: ViTConfig
    aug_layers: tuple[int, ...]
    embed: nx.OpCache
    blocks: list[BlockCache]
    plans: list[MergePlan | None]
    token_counts: list[int]  # tokens entering each layer, [CLS] included
    cls_features: list[np.ndarray]  # post-block [CLS] rows, [B, d] per layer
    final_ln: nx.OpCache
    head: nx.OpCache
    logits: np.ndarray
    final_sizes: np.ndarray = field(repr=False, default=None)  # [B, N_out]

    @property
    def batch(self) -> int:
        return self.logits.shape[0]


def model_forward(images: np.ndarray, params: ViTParams, adapt_state=None, merge: MergeConfig | None = None) -> ForwardTrace:
    cfg = params.config
    merge = merge or MergeConfig()
    schedule = merge_schedule(cfg.num_tokens, cfg.num_layers, merge.r)
    forward_calls.tick()
    x, sizes, embed = patch_embed(images, params, adapt_state)
    blocks, plans, counts, feats = [], [], [], []
    for l in range(cfg.num_layers):
        counts.append(x.shape[1])
        x, sizes, plan, cache = block_forward(x, sizes, l, params, adapt_state, schedule[l])
        blocks.append(cache)
        plans.append(plan)
        feats.append(x[:, 0].copy())
    z, final_ln = nx.layernorm(x[:, 0], _affine(params, adapt_state, "norm_g"), _affine(params, adapt_state, "norm_b"), cfg.ln_eps)
    logits, head = nx.linear(z, params["head_w"], params["head_b"])
    return ForwardTrace(cfg, _aug_layers(adapt_state), embed, blocks, plans, counts, feats,
                        final_ln, head, logits, sizes)


def model_backward(
    trace: ForwardTrace,
    grad_logits: np.ndarray,
    params: ViTParams,
    adapt_state=None,
    grad_cls: list[np.ndarray | None] | None = None,
    full: bool = False,
) -> dict[str, np.ndarray]:
    """Gradients of a loss whose upstream gradients are ``grad_logits`` and ``grad_cls[l]``.

    The default (``full=False``) returns exactly the test-time tunables: every
    LayerNorm gamma/beta, ``delta`` and ``delta.{l}`` for the augmented layers.
    ``full=True`` additionally returns every frozen weight (used for source training).
    """
    cfg = params.config
    if trace.config != cfg:
        raise StateError("trace was produced with a different model config")
    if trace.aug_layers != _aug_layers(adapt_state):
        raise StateError(f"trace augmented layers {trace.aug_layers} != state {_aug_layers(adapt_state)}")
    if grad_logits.shape != trace.logits.shape:
        raise StateError(f"grad_logits {grad_logits.shape} != logits {trace.logits.shape}")
    if grad_cls is not None and len(grad_cls) != cfg.num_layers:
        raise StateError("grad_cls must have one entry per layer")

    grads: dict[str, np.ndarray] = {}
    g_z, gw, gb = nx.linear_backward(grad_logits, trace.head, full)
    if full:
        grads["head_w"], grads["head_b"] = gw, gb
    g_cls, grads["norm_g"], grads["norm_b"] = nx.layernorm_backward(g_z, trace.final_ln)

    g_x = np.zeros((trace.batch, trace.final_sizes.shape[1], cfg.hidden_dim), dtype=grad_logits.dtype)
    g_x[:, 0] = g_cls
    for l in range(cfg.num_layers - 1, -1, -1):
        if grad_cls is not None and grad_cls[l] is not None:
            g_x[:, 0] += grad_cls[l]
        g_x, layer_grads = block_backward(g_x, trace.blocks[l], params, full)
        grads.update(layer_grads)

    grads["delta"] = g_x[:, 0].sum(axis=0)
    if full:
        grads["cls"] = grads["delta"].copy()
        grads["pos"] = g_x.sum(axis=0)
        (lin_cache,) = trace.embed.expect("patch_embed")
        _, grads["patch_w"], grads["patch_b"] = nx.linear_backward(g_x[:, 1:], lin_cache, True)
    return grads


# -----------------------------------------------------------------------------
# checkpoints
# -----------------------------------------------------------------------------

CHECKPOINT_KIND = "vit"


def save_checkpoint(params: ViTParams, path) -> None:
    write_arrays(path, params.tensors, CHECKPOINT_KIND, {"config": params.config.to_dict()})


def load_checkpoint(path, config: ViTConfig | None = None) -> ViTParams:
    manifest, arrays = read_arrays(path, CHECKPOINT_KIND)
    try:
        stored = ViTConfig(**manifest["meta"]["config"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"{path}: bad config in manifest ({exc})") from None
    if config is not None and stored != config:
        raise FormatError(f"{path}: checkpoint config {stored} conflicts with expected {config}")
    try:
        return ViTParams(stored, {k: v.astype(nx.DTYPE, copy=False) for k, v in arrays.items()})
    except ConfigError as exc:
        raise FormatError(f"{path}: {exc}") from None


def predict(images: np.ndarray, params: ViTParams, adapt_state=None, merge: MergeConfig | None = None,
            batch_size: int = 256) -> np.ndarray:
    """Logits for a (possibly large) image array, processed in chunks."""
    out = []
    for i in range(0, len(images), batch_size):
        out.append(model_forward(images[i:i + batch_size], params, adapt_state, merge).logits)
    return np.concatenate(out) if out else np.zeros((0, params.config.num_classes), nx.DTYPE)


def tunable_names(cfg: ViTConfig, aug_layers: Any = ()) -> list[str]:
    return norm_param_names(cfg) + ["delta"] + [f"delta.{l}" for l in sorted(aug_layers)]
