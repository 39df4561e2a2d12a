"""Differentiable operations on single-image (batch size 1) tensors.

Image-like tensors are laid out ``C x H x W``. Every op computes in the dtype
of its inputs; reductions run in a fixed order so repeated calls are bitwise
reproducible.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from ..errors import ContractError, ShapeError
from .tensor import Tensor, as_tensor, record

PROB_FLOOR = 1e-7


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return record("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def mul_scalar(a: Tensor, s: float) -> Tensor:
    a = as_tensor(a)
    s = a.data.dtype.type(s)
    return record("mul_scalar", a.data * s, (a,), lambda g: (g * s,))


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return record("sum", np.array(a.data.sum(), dtype=a.dtype), (a,),
                  lambda g: (np.full_like(a.data, g),))


def mean_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return record("mean", np.array(a.data.sum() / n, dtype=a.dtype), (a,),
                  lambda g: (np.full_like(a.data, g / n),))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return record("relu", np.maximum(a.data, 0), (a,), lambda g: (g * pos,))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    slope = a.data.dtype.type(slope)
    scale = np.where(a.data > 0, a.data.dtype.type(1), slope)
    return record("leaky_relu", a.data * scale, (a,), lambda g: (g * scale,))


def _check_chw(x: Tensor, op: str) -> None:
    if x.data.ndim != 3:
        raise ShapeError(f"{op}: expected a C x H x W tensor, got shape {x.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation via im2col and one matrix product."""
    x, weight = as_tensor(x), as_tensor(weight)
    _check_chw(x, "conv2d")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be C_out x C_in x k x k, got {weight.shape}")
    c_out, c_in, k, k2 = weight.shape
    C, H, W = x.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if C != c_in:
        raise ShapeError(f"conv2d: input has {C} channels but weight expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {c_out} output channels")
    Hp, Wp = H + 2 * pad, W + 2 * pad
    if Hp < k or Wp < k:
        raise ShapeError(f"conv2d: padded input {Hp}x{Wp} smaller than kernel {k}x{k}")
    Ho = (Hp - k) // stride + 1
    Wo = (Wp - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    if k == 1 and stride == 1:
        cols = xp.reshape(C, Ho * Wo)
    else:
        cols = np.empty((C, k, k, Ho, Wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, i, j] = xp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
        cols = cols.reshape(C * k * k, Ho * Wo)
    wmat = weight.data.reshape(c_out, c_in * k * k)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(c_out, Ho, Wo)

    def vjp(g):
        g2 = g.reshape(c_out, Ho * Wo)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gb = g2.sum(axis=1) if bias is not None else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(C, k, k, Ho, Wo)
            gxp = np.zeros((C, Hp, Wp), dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, i, j]
            gx = gxp[:, pad:pad + H, pad:pad + W] if pad else gxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record("conv2d", out, inputs, vjp)


def avg_pool2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 average pooling."""
    x = as_tensor(x)
    _check_chw(x, "avg_pool2")
    C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avg_pool2: spatial size {H}x{W} is not even")
    quarter = x.dtype.type(0.25)
    out = x.data.reshape(C, H // 2, 2, W // 2, 2).sum(axis=(2, 4)) * quarter

    def vjp(g):
        gq = g * quarter
        return (np.repeat(np.repeat(gq, 2, axis=1), 2, axis=2),)

    return record("avg_pool2", out, (x,), vjp)


@lru_cache(maxsize=128)
def interp_matrix(n_in: int, n_out: int, dtype_name: str = "float32") -> np.ndarray:
    """Row-stochastic ``n_out x n_in`` bilinear weights, half-pixel centers, edge clamp."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for d in range(n_out):
        src = min(max((d + 0.5) * scale - 0.5, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        w1 = src - i0
        m[d, i0] += 1.0 - w1
        m[d, i1] += w1
    m = m.astype(dtype_name)
    m.setflags(write=False)
    return m


def bilinear_resize(x: Tensor, new_h: int, new_w: int) -> Tensor:
    x = as_tensor(x)
    _check_chw(x, "bilinear_resize")
    _, H, W = x.shape
    if new_h < 1 or new_w < 1:
        raise ShapeError(f"bilinear_resize: invalid target size {new_h}x{new_w}")
    if (new_h, new_w) == (H, W):
        return record("resize", x.data.copy(), (x,), lambda g: (g,))
    ry = interp_matrix(H, new_h, x.dtype.name)
    rx = interp_matrix(W, new_w, x.dtype.name)
    out = (ry @ x.data) @ rx.T
    return record("resize", out, (x,), lambda g: ((ry.T @ g) @ rx,))


def softmax_over_channels(x: Tensor) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=0, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=0, keepdims=True)),)

    return record("softmax", p, (x,), vjp)


def channel_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over the spatial dims, then a per-channel affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check_chw(x, "channel_norm")
    C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"channel_norm: affine shapes {gamma.shape}/{beta.shape} do not match {C} channels")
    n = H * W
    flat = x.data.reshape(C, n)
    mu = flat.mean(axis=1, keepdims=True)
    centered = flat - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = (1.0 / np.sqrt(var + x.dtype.type(eps))).astype(x.dtype)
    xhat = centered * inv_std
    out = (gamma.data[:, None] * xhat + beta.data[:, None]).reshape(C, H, W)

    def vjp(g):
        g2 = g.reshape(C, n)
        ggamma = (g2 * xhat).sum(axis=1)
        gbeta = g2.sum(axis=1)
        gx = None
        if x.requires_grad:
            dxhat = g2 * gamma.data[:, None]
            gx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=1, keepdims=True)
                                  - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
            gx = gx.reshape(C, H, W).astype(x.dtype)
        return gx, ggamma, gbeta

    return record("channel_norm", out, (x, gamma, beta), vjp)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate). ``rng=None`` is the identity."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    if rng is None or rate == 0.0:
        return record("dropout", x.data.copy(), (x,), lambda g: (g,))
    keep = rng.random(x.shape) >= rate
    scale = (keep / (1.0 - rate)).astype(x.dtype)
    return record("dropout", x.data * scale, (x,), lambda g: (g * scale,))


def _label_probs(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return np.take_along_axis(probs, labels[None].astype(np.intp), axis=0)[0]


def pixel_nll(probs: Tensor, labels: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted mean over pixels of ``-log p[label]`` with p clamped to [1e-7, 1].

    With ``weights`` all zero there is no pixel to average over; the result is
    a constant zero tensor carrying no gradient.
    """
    probs = as_tensor(probs)
    _check_chw(probs, "pixel_nll")
    C, H, W = probs.shape
    labels = np.asarray(labels)
    if labels.shape != (H, W):
        raise ShapeError(f"pixel_nll: labels shape {labels.shape} does not match {H}x{W}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ContractError(f"pixel_nll: labels must lie in [0, {C})")
    dt = probs.dtype
    if weights is None:
        w = np.ones((H, W), dtype=dt)
    else:
        w = np.asarray(weights).astype(dt)
        if w.shape != (H, W):
            raise ShapeError(f"pixel_nll: weight map shape {w.shape} does not match {H}x{W}")
    total = float(w.sum(dtype=np.float64))
    if total == 0.0:
        return Tensor(np.zeros((), dtype=dt))
    py = _label_probs(probs.data, labels)
    clamped = np.clip(py, dt.type(PROB_FLOOR), dt.type(1.0))
    loss = -(w * np.log(clamped)).sum(dtype=np.float64) / total

    def vjp(g):
        live = (py > PROB_FLOOR) & (py <= 1.0)
        dpy = np.where(live, -w / (clamped * dt.type(total)), 0).astype(dt) * g
        gp = np.zeros_like(probs.data)
        np.put_along_axis(gp, labels[None].astype(np.intp), dpy[None], axis=0)
        return (gp,)

    return record("pixel_nll", np.array(loss, dtype=dt), (probs,), vjp)


def pixel_entropy(probs: Tensor) -> Tensor:
    """Mean over pixels of the Shannon entropy across channels."""
    probs = as_tensor(probs)
    _check_chw(probs, "pixel_entropy")
    dt = probs.dtype
    n = probs.shape[1] * probs.shape[2]
    clamped = np.clip(probs.data, dt.type(PROB_FLOOR), dt.type(1.0))
    logp = np.log(clamped)
    value = -(probs.data * logp).sum(dtype=np.float64) / n

    def vjp(g):
        live = probs.data > PROB_FLOOR
        return ((-(logp + np.where(live, 1, 0).astype(dt)) / dt.type(n)) * g,)

    return record("pixel_entropy", np.array(value, dtype=dt), (probs,), vjp)
