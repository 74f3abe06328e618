"""Convolution kernels, batch norm, and exact parameter/FLOP accounting.

All convolutions are cross-correlations (no kernel flip) over NCHW
activations with explicit zero padding. Standard convolution goes through a
single im2col GEMM; depthwise convolution is a sum of K*K shifted,
per-channel scaled views, which keeps its cost proportional to C*K*K.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import ops
from .errors import ContractError, ShapeError
from .rng import Rng
from .tensor import Tensor, make_result

KINDS = ("standard", "depthwise", "pointwise", "separable")
ORDERS = ("depthwise_first", "pointwise_first")


def out_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"size {size} with kernel {k}, stride {stride}, padding {padding} does not tile evenly")
    return span // stride + 1


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _check_4d(x: Tensor, what: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{what} expects [N, C, H, W], got dims {x.dims}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Standard convolution, ``weight: [C_out, C_in, K, K]``."""
    _check_4d(x, "conv2d")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if ci != c or kh != kw:
        raise ShapeError(f"conv2d: input dims {x.dims} incompatible with weight {weight.dims}")
    k, s, p = kh, stride, padding
    ho, wo = out_size(h, k, s, p), out_size(w, k, s, p)
    xp = _pad(x.data, p)
    # columns laid out [C*K*K, N*Ho*Wo] so every copy runs along output rows
    if k == 1:
        cols = xp[:, :, ::s, ::s].transpose(1, 0, 2, 3).reshape(c, n * ho * wo)
    else:
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)
    w2 = weight.data.reshape(co, -1)
    out = w2 @ cols
    if bias is not None:
        if bias.shape != (co,):
            raise ShapeError(f"conv2d bias dims {bias.dims} != [{co}]")
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(co, n, ho, wo).transpose(1, 0, 2, 3))
    parents: tuple[Tensor, ...] = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        gt = g.transpose(1, 0, 2, 3).reshape(co, n * ho * wo)
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ gt).reshape(c, k, k, n, ho, wo)
            if k == 1 and s == 1:
                gxp = gcols[:, 0, 0]
            else:
                gxp = np.zeros((c, n) + xp.shape[2:], dtype=x.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += gcols[:, i, j]
            gx = gxp.transpose(1, 0, 2, 3)[:, :, p:p + h, p:p + w]
        gw = (gt @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(gt.sum(axis=1))
        return grads

    return make_result(out, parents, grad_fn)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Per-channel convolution, ``weight: [C, 1, K, K]`` (multiplier 1)."""
    _check_4d(x, "depthwise_conv2d")
    n, c, h, w = x.shape
    if weight.data.ndim != 4 or weight.shape[0] != c or weight.shape[1] != 1 \
            or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"depthwise: input dims {x.dims} incompatible with weight {weight.dims}")
    k, s, p = weight.shape[2], stride, padding
    ho, wo = out_size(h, k, s, p), out_size(w, k, s, p)
    xp = _pad(x.data, p)
    wv = weight.data[:, 0]

    def window(arr, i, j):
        return arr[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]

    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out += window(xp, i, j) * wv[:, i, j][None, :, None, None]
    if bias is not None:
        if bias.shape != (c,):
            raise ShapeError(f"depthwise bias dims {bias.dims} != [{c}]")
        out += bias.data[None, :, None, None]
    parents: tuple[Tensor, ...] = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    window(gxp, i, j)[...] += g * wv[:, i, j][None, :, None, None]
            gx = gxp[:, :, p:p + h, p:p + w]
        if weight.requires_grad:
            gw = np.empty(weight.shape, dtype=weight.dtype)
            for i in range(k):
                for j in range(k):
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, window(xp, i, j))
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_result(out, parents, grad_fn)


def pointwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 channel mixing, ``weight: [C_out, C_in, 1, 1]``."""
    if weight.data.ndim != 4 or weight.shape[2:] != (1, 1):
        raise ContractError(f"pointwise conv needs a 1x1 kernel, got weight dims {weight.dims}")
    return conv2d(x, weight, bias, stride=1, padding=0)


def separable_conv2d(x: Tensor, dw_weight: Tensor, pw_weight: Tensor, bias: Tensor | None = None,
                     stride: int = 1, padding: int = 0, order: str = "depthwise_first") -> Tensor:
    """Depthwise + pointwise composition; the bias belongs to the second stage."""
    if order == "depthwise_first":
        y = depthwise_conv2d(x, dw_weight, None, stride, padding)
        return pointwise_conv2d(y, pw_weight, bias)
    if order == "pointwise_first":
        y = pointwise_conv2d(x, pw_weight, None)
        return depthwise_conv2d(y, dw_weight, bias, stride, padding)
    raise ContractError(f"unknown dsc order {order!r}")


@dataclass(frozen=True)
class ConvSpec:
    kind: str
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    has_bias: bool = False
    dsc_order: str = "depthwise_first"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown conv kind {self.kind!r}")
        if self.in_channels < 1 or self.out_channels < 1 or self.kernel_size < 1:
            raise ContractError(f"channels and kernel size must be >= 1: {self}")
        if self.stride < 1 or self.padding < 0:
            raise ContractError(f"stride must be >= 1 and padding >= 0: {self}")
        if self.kind == "depthwise" and self.in_channels != self.out_channels:
            raise ContractError("depthwise conv requires in_channels == out_channels")
        if self.kind == "pointwise" and self.kernel_size != 1:
            raise ContractError("pointwise conv requires kernel_size == 1")
        if self.dsc_order not in ORDERS:
            raise ContractError(f"unknown dsc order {self.dsc_order!r}")

    def output_hw(self, hw: tuple[int, int]) -> tuple[int, int]:
        k = 1 if self.kind == "pointwise" else self.kernel_size
        p = 0 if self.kind == "pointwise" else self.padding
        s = 1 if self.kind == "pointwise" else self.stride
        return out_size(hw[0], k, s, p), out_size(hw[1], k, s, p)

    def standard_equivalent(self) -> "ConvSpec":
        return ConvSpec("standard", self.in_channels, self.out_channels, self.kernel_size,
                        self.stride, self.padding, self.has_bias)


@dataclass
class CostReport:
    params: int
    param_bytes: int
    flops: int
    ratio_vs_standard: Fraction | None = None

    def __add__(self, other: "CostReport") -> "CostReport":
        return CostReport(self.params + other.params, self.param_bytes + other.param_bytes,
                          self.flops + other.flops)


def dtype_width(dtype) -> int:
    if isinstance(dtype, str):
        return {"float32": 4, "float64": 8}[dtype]
    return np.dtype(dtype).itemsize


def count_cost(spec: ConvSpec, input_hw: tuple[int, int], dtype="float32") -> CostReport:
    """Exact parameter count and FLOPs (2 x MACs, bias excluded) for one image."""
    ci, co, k = spec.in_channels, spec.out_channels, spec.kernel_size
    h, w = input_hw
    ho, wo = spec.output_hw((h, w))
    bias = co if spec.has_bias else 0
    ratio = None
    if spec.kind == "standard":
        params = co * ci * k * k + bias
        flops = 2 * ho * wo * co * ci * k * k
    elif spec.kind == "depthwise":
        params = ci * k * k + bias
        flops = 2 * ho * wo * ci * k * k
    elif spec.kind == "pointwise":
        params = co * ci + bias
        flops = 2 * ho * wo * co * ci
    elif spec.dsc_order == "depthwise_first":
        params = ci * k * k + ci * co + bias
        flops = 2 * ho * wo * ci * k * k + 2 * ho * wo * ci * co
    else:
        params = ci * co + co * k * k + bias
        flops = 2 * h * w * ci * co + 2 * ho * wo * co * k * k
    if spec.kind == "separable":
        std = count_cost(spec.standard_equivalent(), input_hw, dtype)
        ratio = Fraction(params, std.params)
    return CostReport(params, params * dtype_width(dtype), flops, ratio)


def he_normal(dims, fan_in: int, rng: Rng, dtype) -> Tensor:
    std = math.sqrt(2.0 / fan_in)
    data = (rng.normal(int(np.prod(dims))) * std).reshape(dims).astype(dtype)
    return Tensor(data, requires_grad=True)


@dataclass
class Conv:
    """A convolution layer: a :class:`ConvSpec` plus its parameter tensors.

    Separable layers hold ``dw_weight`` and ``pw_weight``; every other kind
    holds a single ``weight``.
    """

    spec: ConvSpec
    weight: Tensor | None = None
    dw_weight: Tensor | None = None
    pw_weight: Tensor | None = None
    bias: Tensor | None = None

    @classmethod
    def build(cls, spec: ConvSpec, rng: Rng, dtype="float32") -> "Conv":
        ci, co, k = spec.in_channels, spec.out_channels, spec.kernel_size
        bias = Tensor(np.zeros(co, dtype=dtype), requires_grad=True) if spec.has_bias else None
        if spec.kind == "standard":
            return cls(spec, weight=he_normal((co, ci, k, k), ci * k * k, rng, dtype), bias=bias)
        if spec.kind == "depthwise":
            return cls(spec, weight=he_normal((ci, 1, k, k), k * k, rng, dtype), bias=bias)
        if spec.kind == "pointwise":
            return cls(spec, weight=he_normal((co, ci, 1, 1), ci, rng, dtype), bias=bias)
        dw_c = ci if spec.dsc_order == "depthwise_first" else co
        dw = he_normal((dw_c, 1, k, k), k * k, rng, dtype)
        pw = he_normal((co, ci, 1, 1), ci, rng, dtype)
        return cls(spec, dw_weight=dw, pw_weight=pw, bias=bias)

    def __call__(self, x: Tensor) -> Tensor:
        s = self.spec
        if s.kind == "standard":
            return conv2d(x, self.weight, self.bias, s.stride, s.padding)
        if s.kind == "depthwise":
            return depthwise_conv2d(x, self.weight, self.bias, s.stride, s.padding)
        if s.kind == "pointwise":
            return pointwise_conv2d(x, self.weight, self.bias)
        return separable_conv2d(x, self.dw_weight, self.pw_weight, self.bias, s.stride,
                                s.padding, s.dsc_order)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name in ("weight", "dw_weight", "pw_weight", "bias"):
            t = getattr(self, name)
            if t is not None:
                yield prefix + name, t

    def cost(self, input_hw, dtype="float32") -> CostReport:
        return count_cost(self.spec, input_hw, dtype)


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def build(cls, channels: int, dtype="float32", eps: float = 1e-5, momentum: float = 0.1):
        if not 0 < momentum < 1:
            raise ContractError("momentum must lie in (0, 1)")
        return cls(Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
                   Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
                   Tensor(np.zeros(channels, dtype=dtype)),
                   Tensor(np.ones(channels, dtype=dtype)), eps, momentum)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield prefix + "gamma", self.gamma
        yield prefix + "beta", self.beta

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield prefix + "running_mean", self.running_mean
        yield prefix + "running_var", self.running_var

    def __call__(self, x: Tensor, mode: str = "training", update_running: bool = True) -> Tensor:
        return batch_norm2d(x, self, mode, update_running)


def batch_norm2d(x: Tensor, p: BatchNormParams, mode: str = "training",
                 update_running: bool = True) -> Tensor:
    """Per-channel normalization followed by the gamma/beta affine map.

    ``training`` uses batch statistics (biased variance) and, unless
    ``update_running`` is false, folds them into the running estimates with
    the unbiased variance. ``inference`` uses the running estimates.
    """
    _check_4d(x, "batch_norm2d")
    n, c, h, w = x.shape
    if p.gamma.shape != (c,):
        raise ShapeError(f"batch norm has {p.gamma.shape[0]} channels, input has {c}")
    dt = x.dtype.type
    gamma = p.gamma.data.reshape(1, c, 1, 1)
    beta = p.beta.data.reshape(1, c, 1, 1)
    if mode == "training":
        m = n * h * w
        if m < 2:
            raise ContractError("training-mode batch norm needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + dt(p.eps))
        xhat = xc * inv_std
        if update_running:
            mom = dt(p.momentum)
            p.running_mean.data[...] = (1 - mom) * p.running_mean.data + mom * mu.reshape(c)
            unbiased = var.reshape(c) * dt(m / (m - 1))
            p.running_var.data[...] = (1 - mom) * p.running_var.data + mom * unbiased

        def grad_fn(g):
            dxhat = g * gamma
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = inv_std * (dxhat - s1 / dt(m) - xhat * s2 / dt(m))
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    elif mode == "inference":
        inv_std = 1.0 / np.sqrt(p.running_var.data.reshape(1, c, 1, 1) + dt(p.eps))
        xhat = (x.data - p.running_mean.data.reshape(1, c, 1, 1)) * inv_std

        def grad_fn(g):
            return g * gamma * inv_std, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    else:
        raise ContractError(f"unknown batch norm mode {mode!r}")
    out = (xhat * gamma + beta).astype(x.dtype, copy=False)
    return make_result(out, (x, p.gamma, p.beta), grad_fn)


upsample_nearest = ops.upsample_nearest
