"""Differentiable elementwise, activation, reduction, and shape ops.

Broadcasting is deliberately narrow: the second operand of a binary op may
match the first exactly, be a per-channel vector ``[C]`` over an
``[N, C, H, W]`` activation, or be a per-sample channel gate
``[N, C, 1, 1]``. Anything else is a :class:`ShapeError`.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor, make_result


def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    if a.data.ndim == 4:
        n, c = a.shape[:2]
        if b.shape == (c,):
            return "channel"
        if b.shape == (n, c, 1, 1):
            return "gate"
    raise ShapeError(f"incompatible dims {a.dims} and {b.dims}")


def _view_b(b: np.ndarray, kind: str) -> np.ndarray:
    return b.reshape(1, -1, 1, 1) if kind == "channel" else b


def _reduce_b(g: np.ndarray, kind: str) -> np.ndarray:
    if kind == "same":
        return g
    if kind == "channel":
        return g.sum(axis=(0, 2, 3))
    return g.sum(axis=(2, 3), keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b)

    def grad_fn(g):
        return g, _reduce_b(g, kind)

    return make_result(a.data + _view_b(b.data, kind), (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b)

    def grad_fn(g):
        return g, -_reduce_b(g, kind)

    return make_result(a.data - _view_b(b.data, kind), (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b)
    bv = _view_b(b.data, kind)

    def grad_fn(g):
        return g * bv, _reduce_b(g * a.data, kind)

    return make_result(a.data * bv, (a, b), grad_fn)


def ewise(kind: str, a: Tensor, b: Tensor) -> Tensor:
    try:
        fn = {"add": add, "sub": sub, "mul": mul}[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise op {kind!r}") from None
    return fn(a, b)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return make_result(x.data * c, (x,), lambda g: (g * c,))


def shift(x: Tensor, c: float) -> Tensor:
    return make_result(x.data + x.dtype.type(c), (x,), lambda g: (g,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    s = x.dtype.type(slope)
    pos = x.data > 0
    factor = np.where(pos, x.dtype.type(1), s)
    return make_result(x.data * factor, (x,), lambda g: (g * factor,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return make_result(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    half = v.dtype.type(0.5)
    return half * (np.tanh(half * v) + 1)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return make_result(t, (x,), lambda g: (g * (1 - t * t),))


def glu(x: Tensor) -> Tensor:
    """First channel half gated by the sigmoid of the second half."""
    if x.data.ndim != 4:
        raise ShapeError(f"glu expects a 4-D activation, got dims {x.dims}")
    c = x.shape[1]
    if c % 2:
        raise ShapeError(f"glu needs an even channel count, got {c}")
    h = c // 2
    a, b = x.data[:, :h], x.data[:, h:]
    s = _sigmoid(b)

    def grad_fn(g):
        return (np.concatenate([g * s, g * a * s * (1 - s)], axis=1),)

    return make_result(a * s, (x,), grad_fn)


def activation(kind: str, x: Tensor, slope: float = 0.2) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "glu":
        return glu(x)
    if kind == "relu":
        return relu(x)
    raise ContractError(f"unknown activation {kind!r}")


def _norm_axes(x: Tensor, axes) -> tuple[int, ...]:
    nd = x.data.ndim
    if axes is None:
        return tuple(range(nd))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -nd <= ax < nd:
            raise ShapeError(f"axis {ax} invalid for dims {x.dims}")
        out.append(ax % nd)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {tuple(axes)}")
    return tuple(sorted(out))


def _reduced_shape(shape, axes) -> tuple[int, ...]:
    kept = tuple(d for i, d in enumerate(shape) if i not in axes)
    return kept or (1,)


def sum(x: Tensor, axes=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    ax = _norm_axes(x, axes)
    out = x.data.sum(axis=ax).reshape(_reduced_shape(x.shape, ax))
    keep = tuple(1 if i in ax else d for i, d in enumerate(x.shape))

    def grad_fn(g):
        return (np.broadcast_to(g.reshape(keep), x.shape),)

    return make_result(out, (x,), grad_fn)


def mean(x: Tensor, axes=None) -> Tensor:
    ax = _norm_axes(x, axes)
    count = int(np.prod([x.shape[i] for i in ax]))
    out = x.data.mean(axis=ax).reshape(_reduced_shape(x.shape, ax))
    keep = tuple(1 if i in ax else d for i, d in enumerate(x.shape))
    inv = x.dtype.type(1.0 / count)

    def grad_fn(g):
        return (np.broadcast_to(g.reshape(keep) * inv, x.shape),)

    return make_result(out, (x,), grad_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-D input, got dims {x.dims}")
    return avg_pool_to(x, 1)


def avg_pool_to(x: Tensor, size: int) -> Tensor:
    """Average-pool ``[N, C, H, W]`` down to ``[N, C, size, size]``.

    H and W must be multiples of ``size`` (always true for the power-of-two
    feature maps used here).
    """
    if x.data.ndim != 4:
        raise ShapeError(f"avg pool expects 4-D input, got dims {x.dims}")
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"cannot pool {h}x{w} evenly to {size}x{size}")
    kh, kw = h // size, w // size
    out = x.data.reshape(n, c, size, kh, size, kw).mean(axis=(3, 5))
    inv = x.dtype.type(1.0 / (kh * kw))

    def grad_fn(g):
        gg = np.broadcast_to((g * inv)[:, :, :, None, :, None], (n, c, size, kh, size, kw))
        return (gg.reshape(n, c, h, w),)

    return make_result(out, (x,), grad_fn)


def reduce(kind: str, x: Tensor, axes=None) -> Tensor:
    if kind == "sum":
        return sum(x, axes)
    if kind == "mean":
        return mean(x, axes)
    if kind == "global_avg_pool":
        return global_avg_pool(x)
    raise ContractError(f"unknown reduction {kind!r}")


def reshape(x: Tensor, dims: Sequence[int]) -> Tensor:
    out = x.data.reshape(tuple(dims))
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x: [N, in]``, ``weight: [out, in]``."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: x {x.dims} incompatible with weight {weight.dims}")
    out = x.data @ weight.data.T
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear bias dims {bias.dims} != [{weight.shape[0]}]")
        out = out + bias.data
        parents = parents + (bias,)

    def grad_fn(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return make_result(out, parents, grad_fn)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    if int(factor) != factor or factor < 2:
        raise ContractError(f"upsample factor must be an integer >= 2, got {factor}")
    if x.data.ndim != 4:
        raise ShapeError(f"upsample expects 4-D input, got dims {x.dims}")
    f = int(factor)
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, f, w, f)).reshape(n, c, h * f, w * f)

    def grad_fn(g):
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return make_result(np.ascontiguousarray(out), (x,), grad_fn)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)
