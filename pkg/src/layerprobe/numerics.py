"""Dense float64 tensor ops with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Every op accepts
optional leading batch axes so the probe models can run a whole minibatch at
once; the backward of each op sums parameter gradients over those axes.

Random numbers
--------------
All randomness goes through :func:`make_rng`, which returns a
``numpy.random.Generator`` over the PCG64 bit generator seeded with
``SeedSequence([seed, stream])``. Draws used by this package are
``Generator.random`` (dropout masks), ``Generator.uniform`` (initialization),
``Generator.standard_normal`` (synthetic banks) and ``Generator.permutation``
(epoch shuffles). Streams are reproducible for a pinned numpy major version.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

LAYERNORM_EPS = 1e-5
GRADCHECK_STEP = 1e-5


class NonFiniteError(FloatingPointError):
    """Raised when a computation produces NaN or infinity."""


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Deterministic PCG64 generator for ``(seed, stream)``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(stream)])))


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = int(np.flatnonzero(~np.isfinite(np.ravel(x)))[0])
        raise NonFiniteError(f"{what} has a non-finite value at flat index {bad}")
    return x


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


# -- matmul -----------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _require(a.ndim >= 1 and b.ndim == 2, f"matmul expects (..., k) @ (k, n), got {a.shape} @ {b.shape}")
    _require(a.shape[-1] == b.shape[0], f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def matmul_backward(a: np.ndarray, b: np.ndarray, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cotangents of ``a @ b`` given the output cotangent; ``b`` is shared across batch axes."""
    ga = grad @ b.T
    gb = a.reshape(-1, a.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])
    return ga, gb


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return matmul(x, weight) + bias


def linear_backward(x, weight, grad):
    gx, gw = matmul_backward(x, weight, grad)
    gb = grad.reshape(-1, grad.shape[-1]).sum(axis=0)
    return gx, gw, gb


# -- softmax ----------------------------------------------------------------


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    _require(v.size > 0 and v.shape[axis] >= 1, "softmax of an empty vector")
    z = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(y: np.ndarray, grad: np.ndarray, axis: int = -1) -> np.ndarray:
    return y * (grad - np.sum(grad * y, axis=axis, keepdims=True))


def logsumexp(v: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(v, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(v - m), axis=axis))


# -- layer norm -------------------------------------------------------------


def layernorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = LAYERNORM_EPS):
    """Normalize over the last axis with biased variance.

    Returns ``(y, cache)``; pass the cache to :func:`layernorm_backward`.
    """
    _require(x.shape[-1] >= 1, "layernorm needs at least one feature")
    _require(gamma.shape == (x.shape[-1],) and beta.shape == (x.shape[-1],),
             f"layernorm affine shape {gamma.shape}/{beta.shape} does not match features {x.shape[-1]}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layernorm_backward(cache, grad: np.ndarray):
    xhat, inv, gamma = cache
    n = xhat.shape[-1]
    flat_g = grad.reshape(-1, n)
    ggamma = np.sum(flat_g * xhat.reshape(-1, n), axis=0)
    gbeta = flat_g.sum(axis=0)
    gxhat = grad * gamma
    gx = inv / n * (n * gxhat - gxhat.sum(axis=-1, keepdims=True)
                    - xhat * np.sum(gxhat * xhat, axis=-1, keepdims=True))
    return gx, ggamma, gbeta


# -- temporal interpolation -------------------------------------------------


def interpolation_matrix(t_in: int, t_out: int) -> np.ndarray:
    """The ``(t_out, t_in)`` matrix of endpoint-aligned linear interpolation."""
    _require(t_in >= 1, f"interpolation source length must be >= 1, got {t_in}")
    _require(t_out >= 1, f"interpolation target length must be >= 1, got {t_out}")
    m = np.zeros((t_out, t_in))
    if t_in == 1:
        m[:, 0] = 1.0
        return m
    if t_out == 1:
        m[0, 0] = 1.0
        return m
    for t in range(t_out):
        pos = t * (t_in - 1) / (t_out - 1)
        i0 = min(int(math.floor(pos)), t_in - 2)
        frac = pos - i0
        m[t, i0] += 1.0 - frac
        m[t, i0 + 1] += frac
    return m


def interpolate_time(x: np.ndarray, t_out: int) -> np.ndarray:
    """Resample ``x[..., T_in, F]`` to ``t_out`` time steps."""
    if x.shape[-2] == t_out:
        return x.copy()
    return interpolation_matrix(x.shape[-2], t_out) @ x


def interpolate_time_backward(grad: np.ndarray, t_in: int) -> np.ndarray:
    if grad.shape[-2] == t_in:
        return grad.copy()
    return interpolation_matrix(t_in, grad.shape[-2]).T @ grad


# -- dropout ----------------------------------------------------------------


def dropout(x: np.ndarray, p: float, rng: np.random.Generator | None, training: bool):
    """Inverted dropout. Returns ``(y, scale)`` where ``scale`` is None when inactive."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x, None
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    keep = rng.random(x.shape) >= p
    scale = keep / (1.0 - p)
    return x * scale, scale


def dropout_backward(scale, grad: np.ndarray) -> np.ndarray:
    return grad if scale is None else grad * scale


# -- self attention ---------------------------------------------------------

ATTENTION_KEYS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


def self_attention(x: np.ndarray, p: dict[str, np.ndarray]):
    """Single-head scaled dot-product self-attention over ``x[..., T, F]``.

    ``p`` maps the names in :data:`ATTENTION_KEYS` to the four ``(F, F)``
    projections and their ``(F,)`` biases. Returns ``(y, cache)``.
    """
    f = x.shape[-1]
    for k in ATTENTION_KEYS:
        want = (f,) if k.startswith("b") else (f, f)
        _require(p[k].shape == want, f"attention parameter {k} has shape {p[k].shape}, expected {want}")
    q = x @ p["wq"] + p["bq"]
    k = x @ p["wk"] + p["bk"]
    v = x @ p["wv"] + p["bv"]
    scale = 1.0 / math.sqrt(f)
    attn = softmax(q @ np.swapaxes(k, -1, -2) * scale, axis=-1)
    o = attn @ v
    y = o @ p["wo"] + p["bo"]
    return y, (x, q, k, v, attn, o, scale)


def self_attention_backward(cache, p: dict[str, np.ndarray], grad: np.ndarray):
    x, q, k, v, attn, o, scale = cache
    g = {}
    go, g["wo"], g["bo"] = linear_backward(o, p["wo"], grad)
    gattn = go @ np.swapaxes(v, -1, -2)
    gv = np.swapaxes(attn, -1, -2) @ go
    gs = softmax_backward(attn, gattn, axis=-1) * scale
    gq = gs @ k
    gk = np.swapaxes(gs, -1, -2) @ q
    gx = np.zeros_like(x)
    for name, gproj in (("q", gq), ("k", gk), ("v", gv)):
        gxi, g["w" + name], g["b" + name] = linear_backward(x, p["w" + name], gproj)
        gx += gxi
    return gx, g


# -- finite differences -----------------------------------------------------


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / denom


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = GRADCHECK_STEP) -> np.ndarray:
    """Central differences of ``f()`` with respect to ``x``, perturbed in place."""
    if not x.flags.c_contiguous:
        raise ValueError("numerical_gradient perturbs in place and needs a C-contiguous array")
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"objective is not finite near flat index {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def gradcheck(f: Callable[[], float], params: dict[str, np.ndarray] | np.ndarray, analytic,
              h: float = GRADCHECK_STEP) -> float:
    """Max relative error between ``analytic`` and central differences of ``f``.

    ``f`` takes no arguments and reads the arrays in ``params``, which are
    perturbed in place and restored. ``analytic`` mirrors ``params`` (one array
    or a dict of arrays with the same keys).
    """
    if isinstance(params, np.ndarray):
        params, analytic = {"x": params}, {"x": analytic}
    worst = 0.0
    for name, x in params.items():
        num = numerical_gradient(f, x, h)
        if num.size:
            worst = max(worst, float(np.max(relative_error(analytic[name], num))))
    return worst
