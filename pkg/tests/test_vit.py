import json
import math
from pathlib import Path

import numpy as np
import pytest

from etta import numerics as nx
from etta.adapt import AdaptState
from etta.container import FormatError
from etta.tokenagg import MergeConfig, ScheduleError
from etta.vit import (ConfigError, StateError, ViTConfig, ViTParams, block_backward, block_forward,
                      forward_calls, init_params, load_checkpoint, model_backward, model_forward, patch_embed,
                      patchify, save_checkpoint, tunable_names)

from conftest import TINY

FIXTURES = Path(__file__).parent / "fixtures"


# -----------------------------------------------------------------------------
# naive reference: per-sample, per-head loops in float64
# -----------------------------------------------------------------------------


def _ln(x, g, b, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def reference_logits(images, params: ViTParams):
    cfg = params.config
    t = {k: v.astype(np.float64) for k, v in params.tensors.items()}
    p, d, h = cfg.patch_size, cfg.hidden_dim, cfg.num_heads
    dh = d // h
    out = []
    for img in images.astype(np.float64):
        rows = [t["cls"]]
        for i in range(0, cfg.image_size, p):
            for j in range(0, cfg.image_size, p):
                rows.append(img[:, i:i + p, j:j + p].reshape(-1) @ t["patch_w"] + t["patch_b"])
        x = np.stack(rows) + t["pos"]
        for l in range(cfg.num_layers):
            q_ = lambda n: t[f"blocks.{l}.{n}"]
            y = _ln(x, q_("ln1_g"), q_("ln1_b"))
            heads = []
            for hd in range(h):
                sl = slice(hd * dh, (hd + 1) * dh)
                q = y @ q_("wq")[:, sl] + q_("bq")[sl]
                k = y @ q_("wk")[:, sl] + q_("bk")[sl]
                v = y @ q_("wv")[:, sl] + q_("bv")[sl]
                s = q @ k.T / math.sqrt(dh)
                a = np.exp(s - s.max(-1, keepdims=True))
                heads.append((a / a.sum(-1, keepdims=True)) @ v)
            x = x + np.concatenate(heads, -1) @ q_("wo") + q_("bo")
            y = _ln(x, q_("ln2_g"), q_("ln2_b"))
            x = x + _gelu(y @ q_("fc1_w") + q_("fc1_b")) @ q_("fc2_w") + q_("fc2_b")
        out.append(_ln(x[0], t["norm_g"], t["norm_b"]) @ t["head_w"] + t["head_b"])
    return np.stack(out)


def _images(cfg, n=2, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (n, cfg.channels, cfg.image_size, cfg.image_size)).astype(np.float32)


def _state(params, budget, seed=0, scale=0.1):
    s = AdaptState.create(params, budget)
    rng = np.random.default_rng(seed)
    for t in s.tunables().values():
        t += (scale * rng.standard_normal(t.shape)).astype(t.dtype)
    return s


# -----------------------------------------------------------------------------
# config / params
# -----------------------------------------------------------------------------


class TestConfig:
    def test_defaults(self):
        c = ViTConfig()
        assert (c.num_patches, c.num_tokens, c.head_dim, c.mlp_dim) == (64, 65, 16, 256)

    @pytest.mark.parametrize("kw", [{"image_size": 30}, {"hidden_dim": 65}, {"num_layers": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            ViTConfig(**kw)

    def test_params_shape_check(self):
        p = init_params(TINY)
        bad = dict(p.tensors, pos=np.zeros((3, 3), np.float32))
        with pytest.raises(ConfigError):
            ViTParams(TINY, bad)

    def test_init_deterministic(self):
        a, b = init_params(TINY, 7), init_params(TINY, 7)
        assert all(np.array_equal(a[k], b[k]) for k in a.tensors)


# -----------------------------------------------------------------------------
# embedding
# -----------------------------------------------------------------------------


class TestPatchEmbed:
    def test_zero_image_zero_weights(self):
        p = init_params(TINY)
        p.tensors["patch_w"][:] = 0
        tokens, sizes, _ = patch_embed(np.zeros((1, 3, 8, 8), np.float32), p)
        expected = p["pos"].copy()
        expected[0] += p["cls"]
        np.testing.assert_array_equal(tokens[0], expected)
        assert (sizes == 1).all()

    def test_zero_delta_is_identity(self, tiny_params):
        x = _images(TINY)
        a, _, _ = patch_embed(x, tiny_params)
        b, _, _ = patch_embed(x, tiny_params, AdaptState.create(tiny_params, 0))
        np.testing.assert_array_equal(a, b)

    def test_cls_row(self, tiny_params):
        s = _state(tiny_params, 0)
        tokens, _, _ = patch_embed(_images(TINY), tiny_params, s)
        expected = tiny_params["cls"] + s.delta + tiny_params["pos"][0]
        np.testing.assert_allclose(tokens[:, 0], np.broadcast_to(expected, tokens[:, 0].shape), rtol=1e-6)

    def test_patch_order(self):
        img = np.arange(3 * 8 * 8, dtype=np.float32).reshape(1, 3, 8, 8)
        patches = patchify(img, 4)
        np.testing.assert_array_equal(patches[0, 1], img[0, :, 0:4, 4:8].reshape(-1))

    def test_dimension_mismatch(self, tiny_params):
        with pytest.raises(ConfigError):
            patch_embed(np.zeros((1, 3, 16, 16), np.float32), tiny_params)


# -----------------------------------------------------------------------------
# forward
# -----------------------------------------------------------------------------


class TestForward:
    def test_matches_reference(self):
        cfg = ViTConfig(num_layers=2)
        p = init_params(cfg, 1)
        x = _images(cfg, 3)
        np.testing.assert_allclose(model_forward(x, p).logits, reference_logits(x, p), atol=1e-5)

    def test_zero_state_no_merge_is_baseline(self, tiny_params):
        x = _images(TINY, 4)
        a = model_forward(x, tiny_params).logits
        b = model_forward(x, tiny_params, AdaptState.create(tiny_params, 2), MergeConfig(0)).logits
        np.testing.assert_array_equal(a, b)

    def test_token_counts_default_config(self):
        p = init_params(ViTConfig())
        tr = model_forward(_images(p.config, 1), p, merge=MergeConfig(4))
        assert tr.token_counts == [65, 61, 57, 53, 49, 45, 41, 37]
        assert tr.final_sizes.shape[1] == 33
        np.testing.assert_allclose(tr.final_sizes.sum(1), 65)

    def test_token_counts_hit_floor(self):
        tr = model_forward(_images(TINY), init_params(TINY), merge=MergeConfig(2))
        # 5 tokens merge 2, then 3 tokens can only merge 1
        assert tr.token_counts == [5, 3, 2]

    def test_schedule_error(self, tiny_params):
        with pytest.raises(ScheduleError):
            model_forward(_images(TINY), tiny_params, merge=MergeConfig(3))

    def test_cls_features_every_layer(self, tiny_params):
        tr = model_forward(_images(TINY, 3), tiny_params)
        assert len(tr.cls_features) == TINY.num_layers
        assert all(f.shape == (3, TINY.hidden_dim) for f in tr.cls_features)

    def test_counter_ticks_once(self, tiny_params):
        c0 = forward_calls.count
        model_forward(_images(TINY), tiny_params, merge=MergeConfig(1))
        assert forward_calls.count == c0 + 1

    def test_block_without_merge_or_bias(self, tiny_params):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 5, 8)).astype(np.float32)
        out, sizes, plan, _ = block_forward(x, np.ones((2, 5), np.float32), 0, tiny_params)
        assert plan is None and out.shape == x.shape

    def test_block_merge_counts(self):
        cfg = ViTConfig(image_size=8, patch_size=2, hidden_dim=8, num_layers=1, num_heads=2)
        p = init_params(cfg)
        x = np.random.default_rng(1).standard_normal((1, 5, 8)).astype(np.float32)
        out, sizes, plan, _ = block_forward(x, np.ones((1, 5), np.float32), 0, p, r=2)
        assert out.shape[1] == 3 and plan.r == 2 and sizes.sum() == 5

    def test_block_bias_only_on_cls(self, tiny_params):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 5, 8)).astype(np.float32)
        s = AdaptState.create(tiny_params, 1)
        s.delta_layers[0][:] = 1.0
        shifted = x.copy()
        shifted[:, 0] += 1.0
        a, *_ = block_forward(x, np.ones((1, 5), np.float32), 0, tiny_params, s)
        b, *_ = block_forward(shifted, np.ones((1, 5), np.float32), 0, tiny_params)
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_golden_logits(self):
        params = load_checkpoint(FIXTURES / "vit_source.etta")
        gold = json.loads((FIXTURES / "golden_logits.json").read_text())
        img = np.load(FIXTURES / "golden_images.npy")
        for r, expected in gold.items():
            logits = model_forward(img, params, merge=MergeConfig(int(r))).logits
            np.testing.assert_allclose(logits, np.array(expected, np.float32), rtol=1e-5, atol=1e-5)


# -----------------------------------------------------------------------------
# gradients
# -----------------------------------------------------------------------------


def _model_loss(trace, r_logits, r_cls):
    return float((trace.logits * r_logits).sum()) + sum(float((f * g).sum()) for f, g in zip(trace.cls_features, r_cls))


@pytest.mark.parametrize("r", [0, 1])
@pytest.mark.parametrize("seed", range(4))
def test_model_backward_tunables(tiny_params, r, seed):
    rng = np.random.default_rng(seed)
    x = _images(TINY, 3, seed)
    state = _state(tiny_params, 2, seed)
    merge = MergeConfig(r)
    r_logits = rng.standard_normal((3, TINY.num_classes)).astype(np.float32)
    r_cls = [rng.standard_normal((3, TINY.hidden_dim)).astype(np.float32) for _ in range(TINY.num_layers)]

    tr = model_forward(x, tiny_params, state, merge)
    grads = model_backward(tr, r_logits, tiny_params, state, grad_cls=r_cls)
    assert set(grads) == set(tunable_names(TINY, state.aug_layers))

    p64 = tiny_params.astype(np.float64)
    s64 = AdaptState.create(p64, 2)
    for name, t in s64.tunables().items():
        t[...] = state.tunables()[name]
    for name, t in s64.tunables().items():
        num = nx.numerical_grad(lambda: _model_loss(model_forward(x, p64, s64, merge), r_logits, r_cls), t)
        assert nx.rel_error(grads[name], num) < 1e-3, name


def test_block_backward_full(tiny_params):
    """Every block input: tokens, weights, LN affines and the [CLS] bias."""
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, 7, 8)).astype(np.float32)
    sizes = np.ones((2, 7), np.float32)
    state = _state(tiny_params, 1, 11)
    g = rng.standard_normal((2, 5, 8)).astype(np.float32)
    _, _, plan, cache = block_forward(x, sizes, 0, tiny_params, state, r=2)
    g_in, grads = block_backward(g, cache, tiny_params, full=True)

    p64 = tiny_params.astype(np.float64)
    s64 = AdaptState.create(p64, 1)
    for n, t in s64.tunables().items():
        t[...] = state.tunables()[n]
    x64 = x.astype(np.float64)

    def loss():
        out, *_ = block_forward(x64, sizes.astype(np.float64), 0, p64, s64, r=2)
        return float((out * g).sum())

    assert nx.rel_error(g_in, nx.numerical_grad(loss, x64)) < 1e-3
    for name in [k for k in grads if k.startswith("blocks.0.") and not k.endswith("bk")]:
        target = s64.norms[name] if name in s64.norms else p64[name]
        assert nx.rel_error(grads[name], nx.numerical_grad(loss, target)) < 1e-3, name
    assert nx.rel_error(grads["delta.0"], nx.numerical_grad(loss, s64.delta_layers[0])) < 1e-3
    # softmax is shift invariant per query row, so the key bias has no effect
    np.testing.assert_allclose(grads["blocks.0.bk"], 0, atol=1e-5)


def test_model_backward_full_weights(tiny_params):
    rng = np.random.default_rng(5)
    x = _images(TINY, 2, 5)
    r_logits = rng.standard_normal((2, TINY.num_classes)).astype(np.float32)
    tr = model_forward(x, tiny_params)
    grads = model_backward(tr, r_logits, tiny_params, full=True)
    assert set(tiny_params.tensors) <= set(grads)
    p64 = tiny_params.astype(np.float64)
    for name in ["patch_w", "pos", "cls", "head_w", "blocks.1.wq", "blocks.2.fc1_b", "blocks.0.wv"]:
        num = nx.numerical_grad(lambda: float((model_forward(x, p64).logits * r_logits).sum()), p64[name])
        assert nx.rel_error(grads[name], num) < 1e-3, name


def test_zero_loss_grad_gives_zero(tiny_params):
    s = _state(tiny_params, 2)
    tr = model_forward(_images(TINY), tiny_params, s)
    grads = model_backward(tr, np.zeros_like(tr.logits), tiny_params, s)
    assert all(not g.any() for g in grads.values())


def test_no_gradient_for_unaugmented_layer():
    cfg = ViTConfig(image_size=8, patch_size=4, hidden_dim=8, num_layers=4, num_heads=2, mlp_ratio=2, num_classes=4)
    p = init_params(cfg)
    s = AdaptState.create(p, 2)
    tr = model_forward(_images(cfg), p, s)
    grads = model_backward(tr, np.ones_like(tr.logits), p, s)
    assert "delta.3" not in grads and "delta.1" in grads
    assert not any(k.startswith("blocks.") and k.endswith("_w") for k in grads)


def test_backward_state_mismatch(tiny_params):
    tr = model_forward(_images(TINY), tiny_params, AdaptState.create(tiny_params, 2))
    with pytest.raises(StateError):
        model_backward(tr, np.zeros_like(tr.logits), tiny_params, AdaptState.create(tiny_params, 1))
    other = init_params(ViTConfig(image_size=8, patch_size=4, hidden_dim=8, num_layers=2, num_heads=2,
                                  mlp_ratio=2, num_classes=4))
    with pytest.raises(StateError):
        model_backward(tr, np.zeros_like(tr.logits), other)


# -----------------------------------------------------------------------------
# checkpoints
# -----------------------------------------------------------------------------


class TestCheckpoint:
    def test_roundtrip_bytes(self, tmp_path, tiny_params):
        a, b = tmp_path / "a.etta", tmp_path / "b.etta"
        save_checkpoint(tiny_params, a)
        loaded = load_checkpoint(a)
        save_checkpoint(loaded, b)
        assert a.read_bytes() == b.read_bytes()
        assert all(np.array_equal(loaded[k], tiny_params[k]) for k in tiny_params.tensors)

    def test_truncated(self, tmp_path, tiny_params):
        path = tmp_path / "a.etta"
        save_checkpoint(tiny_params, path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path, tiny_params):
        path = tmp_path / "a.etta"
        save_checkpoint(tiny_params, path)
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_config_conflict(self, tmp_path, tiny_params):
        path = tmp_path / "a.etta"
        save_checkpoint(tiny_params, path)
        with pytest.raises(FormatError):
            load_checkpoint(path, ViTConfig())

    def test_manifest_shape_conflict(self, tmp_path, tiny_params):
        path = tmp_path / "a.etta"
        tensors = dict(tiny_params.tensors)
        # same byte count, wrong shape for the config
        tensors["head_w"] = tensors["head_w"].reshape(tensors["head_w"].shape[::-1]).copy()
        from etta.container import write_arrays
        write_arrays(path, tensors, "vit", {"config": TINY.to_dict()})
        with pytest.raises(FormatError):
            load_checkpoint(path)
