"""Dense float kernels with handwritten backward passes.

Every forward kernel returns ``(out, cache)``; the matching ``*_backward``
consumes that cache and returns gradients for the differentiable inputs.
Arrays are plain row-major ``numpy`` arrays. The model runs in float32, but
kernels preserve the input dtype so that the finite-difference oracle can
evaluate them in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

DTYPE = np.float32
LN_EPS = 1e-6
_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Operand shapes are inconsistent."""


@dataclass(frozen=True)
class OpCache:
    kind: str
    saved: tuple

    def expect(self, kind: str) -> tuple:
        if self.kind != kind:
            raise TypeError(f"{kind}_backward got a cache from {self.kind}")
        return self.saved


# -----------------------------------------------------------------------------
# matmul / linear
# -----------------------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, OpCache]:
    """Batched matrix product over the last two axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b, OpCache("matmul", (a, b))


def matmul_backward(grad: np.ndarray, cache: OpCache) -> tuple[np.ndarray, np.ndarray]:
    a, b = cache.expect("matmul")
    grad_a = grad @ np.swapaxes(b, -1, -2)
    grad_b = np.swapaxes(a, -1, -2) @ grad
    # collapse broadcast batch axes back onto the operand shapes
    if grad_a.shape != a.shape:
        grad_a = _unbroadcast(grad_a, a.shape)
    if grad_b.shape != b.shape:
        grad_b = _unbroadcast(grad_b, b.shape)
    return grad_a, grad_b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None) -> tuple[np.ndarray, OpCache]:
    """``x[..., k] @ w[k, n] + b[n]``."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    # one 2-D GEMM is markedly faster than numpy's stacked matmul
    x2 = x.reshape(-1, x.shape[-1])
    out = x2 @ w
    if b is not None:
        out += b
    return out.reshape(x.shape[:-1] + (w.shape[1],)), OpCache("linear", (x2, w, b is not None))


def linear_backward(
    grad: np.ndarray, cache: OpCache, weight_grads: bool = True
) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
    """Returns ``(grad_x, grad_w, grad_b)``; weight grads are skipped (None) when frozen."""
    x2, w, has_bias = cache.expect("linear")
    g2 = grad.reshape(-1, grad.shape[-1])
    grad_x = (g2 @ w.T).reshape(grad.shape[:-1] + (w.shape[0],))
    if not weight_grads:
        return grad_x, None, None
    grad_w = x2.T @ g2
    grad_b = g2.sum(axis=0) if has_bias else None
    return grad_x, grad_w, grad_b


# -----------------------------------------------------------------------------
# normalisation / activations
# -----------------------------------------------------------------------------


def _row_sum(x: np.ndarray) -> np.ndarray:
    # reduction over a short last axis as a GEMV: much faster than ndarray.sum
    return x @ np.ones((x.shape[-1], 1), dtype=x.dtype)


def layernorm(
    x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = LN_EPS
) -> tuple[np.ndarray, OpCache]:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: affine shapes {gamma.shape}/{beta.shape} vs width {d}")
    xhat = x - _row_sum(x) * (1.0 / d)
    sq = xhat * xhat
    inv_std = _row_sum(sq)
    inv_std *= 1.0 / d
    inv_std += eps
    np.sqrt(inv_std, out=inv_std)
    np.divide(1.0, inv_std, out=inv_std)
    xhat *= inv_std
    np.multiply(xhat, gamma, out=sq)
    sq += beta
    return sq, OpCache("layernorm", (xhat, inv_std, gamma))


def layernorm_backward(
    grad: np.ndarray, cache: OpCache
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv_std, gamma = cache.expect("layernorm")
    d = xhat.shape[-1]
    flat_g = grad.reshape(-1, d)
    flat_x = xhat.reshape(-1, d)
    grad_beta = flat_g.sum(axis=0)
    g_hat = grad * gamma
    tmp = g_hat * xhat
    grad_gamma = (flat_g * flat_x).sum(axis=0)
    proj = _row_sum(tmp)
    proj *= 1.0 / d
    np.multiply(xhat, proj, out=tmp)
    g_hat -= _row_sum(g_hat) * (1.0 / d)
    g_hat -= tmp
    g_hat *= inv_std
    return g_hat, grad_gamma, grad_beta


def softmax(x: np.ndarray, axis: int = -1, inplace: bool = False) -> tuple[np.ndarray, OpCache]:
    """Max-subtracted softmax; ``inplace`` reuses ``x`` as the output buffer."""
    if axis not in (-1, x.ndim - 1):
        z = x - x.max(axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=axis, keepdims=True)
        return y, OpCache("softmax", (y, axis))
    y = x if inplace else x.copy()
    y -= y.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y *= 1.0 / _row_sum(y)
    return y, OpCache("softmax", (y, -1))


def softmax_backward(grad: np.ndarray, cache: OpCache, inplace: bool = False) -> np.ndarray:
    y, axis = cache.expect("softmax")
    if axis != -1:
        return y * (grad - (grad * y).sum(axis=axis, keepdims=True))
    gy = grad * y
    out = grad if inplace else grad.copy()
    out -= _row_sum(gy)
    out *= y
    return out


def gelu(x: np.ndarray) -> tuple[np.ndarray, OpCache]:
    """tanh-approximated GELU."""
    t = x * x
    t *= 0.044715
    t += 1.0
    t *= x
    t *= _GELU_C
    np.tanh(t, out=t)
    y = t + 1.0
    y *= x
    y *= 0.5
    return y, OpCache("gelu", (x, t))


def gelu_backward(grad: np.ndarray, cache: OpCache) -> np.ndarray:
    x, t = cache.expect("gelu")
    # d/dx = 0.5(1+t) + 0.5 x (1-t^2) c (1 + 3a x^2)
    dinner = x * x
    dinner *= 3 * 0.044715 * _GELU_C
    dinner += _GELU_C
    sech2 = t * t
    np.subtract(1.0, sech2, out=sech2)
    sech2 *= x
    sech2 *= dinner
    sech2 += t
    sech2 += 1.0
    sech2 *= 0.5
    sech2 *= grad
    return sech2


# -----------------------------------------------------------------------------
# losses
# -----------------------------------------------------------------------------


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, OpCache]:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: labels {labels.shape} for logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"cross_entropy: label outside [0, {c})")
    logp = log_softmax(logits)
    loss = float(-logp[np.arange(n), labels].mean())
    return loss, OpCache("cross_entropy", (logp, labels))


def cross_entropy_backward(grad: float, cache: OpCache) -> np.ndarray:
    logp, labels = cache.expect("cross_entropy")
    n = logp.shape[0]
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    return g * (grad / n)


# -----------------------------------------------------------------------------
# optimisers (in place)
# -----------------------------------------------------------------------------


def sgd_step(
    param: np.ndarray, grad: np.ndarray, buf: np.ndarray, lr: float, momentum: float
) -> np.ndarray:
    """Heavy-ball SGD: ``v <- m*v + g``; ``p <- p - lr*v``. Mutates ``param`` and ``buf``."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    buf *= momentum
    buf += grad
    if lr:
        param -= lr * buf
    return param


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> np.ndarray:
    """AdamW update at step ``t`` (1-based). Mutates ``param``, ``m`` and ``v``."""
    if weight_decay:
        param -= lr * weight_decay * param
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad * grad
    mhat = m / (1 - beta1**t)
    vhat = v / (1 - beta2**t)
    param -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(param.dtype)
    return param


# -----------------------------------------------------------------------------
# finite-difference oracle
# -----------------------------------------------------------------------------


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``x`` (perturbed in place)."""
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Norm-wise relative error ``|a-n| / max(|a|, |n|)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)
