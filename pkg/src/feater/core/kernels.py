"""Dense float64 kernels with hand-written backward rules.

All functions accept :class:`Tensor` or array-likes and return a new
:class:`Tensor`. Matmuls and channel convolutions report their
multiply-accumulates to the active :class:`MacCounter`.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.special import erf

from feater.core.autograd import Tensor, as_tensor, record
from feater.core.counting import record_macs
from feater.errors import DimensionError, ParameterError

DEFAULT_LN_EPS = 1e-5
_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = Tensor(a.data - b.data)
    except ValueError as exc:
        raise DimensionError(f"cannot subtract shapes {a.shape} and {b.shape}") from exc
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may be a python scalar."""
    a = as_tensor(a)
    if np.isscalar(b):
        c = float(b)
        return record(Tensor(a.data * c), (a,), lambda g: (g * c,))
    b = as_tensor(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record(out, (a, b), backward)


def total(x) -> Tensor:
    x = as_tensor(x)
    return record(Tensor(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    k = 1.0 / x.size
    return record(Tensor(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) * k),))


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT_2))
    out = Tensor(x.data * cdf)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return record(out, (x,), backward)


# shape -----------------------------------------------------------------------

def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = Tensor(x.data.reshape(shape))
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc
    return record(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(np.transpose(x.data, axes)))
    return record(out, (x,), lambda g: (np.transpose(g, inverse),))


def zero_channels(x, indices: Sequence[int]) -> Tensor:
    """Copy of ``x`` with the listed leading-axis slices set to zero."""
    x = as_tensor(x)
    idx = np.asarray(sorted(indices), dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise DimensionError(f"channel indices {idx.tolist()} out of range for {x.shape[0]} channels")
    data = x.data.copy()
    data[idx] = 0.0

    def backward(g):
        g = g.copy()
        g[idx] = 0.0
        return (g,)

    return record(Tensor(data), (x,), backward)


# linear algebra ----------------------------------------------------------------

def matmul(a, b, label: str | None = None, *, weight: bool = False) -> Tensor:
    """Batched matrix product ``[*, p, q] @ [*, q, r] -> [*, p, r]``.

    ``b`` may also be a bare ``[q, r]`` matrix shared by every batch slice.
    Records ``batch * p * q * r`` MACs under ``label``; with ``weight=True``
    the entries of ``b`` are also reported as that layer's parameters.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    shared = b.ndim == 2 and a.ndim > 2
    if a.shape[-1] != b.shape[-2] or (not shared and a.shape[:-2] != b.shape[:-2]):
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    p, q = a.shape[-2:]
    r = b.shape[-1]
    batch = math.prod(a.shape[:-2])
    record_macs(label, batch * p * q * r, b.size if weight else 0)
    out = Tensor(np.matmul(a.data, b.data))

    def backward(g):
        ga = np.matmul(g, _swap(b.data)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if shared:
                gb = a.data.reshape(-1, q).T @ g.reshape(-1, r)
            else:
                gb = np.matmul(_swap(a.data), g)
        return ga, gb

    return record(out, (a, b), backward)


def linear(x, weight, bias=None, label: str | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis."""
    y = matmul(x, weight, label, weight=True)
    return y if bias is None else add(y, bias)


def conv_channel_1x1(x, weight, bias=None, label: str | None = None) -> Tensor:
    """Per-pixel channel mixing: ``[n_in, h, w] -> [n_out, h, w]``.

    ``weight`` is ``[n_out, n_in]``; ``bias`` is ``[n_out]`` or ``None``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 2 or weight.shape[1] != x.shape[0]:
        raise DimensionError(f"conv_channel_1x1 mismatch: weight {weight.shape} vs input {x.shape}")
    n_in, h, w = x.shape
    n_out = weight.shape[0]
    record_macs(label, n_out * n_in * h * w, weight.size)
    flat = x.data.reshape(n_in, h * w)
    out = Tensor((weight.data @ flat).reshape(n_out, h, w))

    def backward(g):
        g2 = g.reshape(n_out, h * w)
        gx = (weight.data.T @ g2).reshape(x.shape) if x.requires_grad else None
        gw = g2 @ flat.T if weight.requires_grad else None
        return gx, gw

    y = record(out, (x, weight), backward)
    if bias is None:
        return y
    bias = as_tensor(bias)
    if bias.shape != (n_out,):
        raise DimensionError(f"conv bias shape {bias.shape} != ({n_out},)")
    return add(y, reshape(bias, (n_out, 1, 1)))


def softmax_lastdim(x) -> Tensor:
    """Max-subtracted softmax over the last axis."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"softmax needs a non-empty last axis, got shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record(Tensor(y), (x,), backward)


def layer_norm(x, axes: Sequence[int], gain, bias, eps: float = DEFAULT_LN_EPS) -> Tensor:
    """Normalise over ``axes`` to zero mean / unit variance, then ``* gain + bias``.

    ``gain`` and ``bias`` must broadcast against ``x``.
    """
    if not eps > 0:
        raise ParameterError(f"layer_norm eps must be positive, got {eps}")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    axes = tuple(a % x.ndim for a in axes)
    try:
        np.broadcast_shapes(x.shape, gain.shape, bias.shape)
    except ValueError as exc:
        raise DimensionError(
            f"gain {gain.shape} / bias {bias.shape} do not broadcast over {x.shape}"
        ) from exc
    count = math.prod(x.shape[a] for a in axes)
    mu = x.data.mean(axis=axes, keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv
    out = Tensor(xhat * gain.data + bias.data)

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            gx = inv * (dxhat - s1 / count - xhat * s2 / count)
        gg = _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None
        gb = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        return gx, gg, gb

    return record(out, (x, gain, bias), backward)


# losses ----------------------------------------------------------------------

def mse(pred, target) -> Tensor:
    """Mean squared difference over every entry."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    k = 2.0 / diff.size

    def backward(g):
        gd = float(g) * k * diff
        return gd, -gd

    return record(Tensor(np.mean(diff * diff)), (pred, target), backward)


def l1_rows(pred, target) -> Tensor:
    """``(1/K) * sum_k ||pred_k - target_k||_1`` for ``[K, D]`` operands."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"l1 shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    k = 1.0 / pred.shape[0]

    def backward(g):
        gd = float(g) * k * np.sign(diff)
        return gd, -gd

    return record(Tensor(np.abs(diff).sum() * k), (pred, target), backward)
