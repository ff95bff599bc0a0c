"""Layer vocabulary: convolution, 2x2 transposed convolution, group norm, bilinear resize.

Convolutions are cross-correlations (no kernel flip), the usual deep
learning orientation. Output size along each spatial axis is
``floor((H + 2P - r*(K-1) - 1) / S) + 1``.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .errors import DimensionError
from .tensor import DEFAULT_DTYPE, Parameter, Tensor, make_op


class Module:
    """Minimal parameter container; attributes are walked in insertion order."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        """Write each parameter's dotted path into ``Parameter.name``."""
        for name, p in self.named_parameters():
            p.name = name

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)}, unexpected={sorted(unexpected)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data[...] = arr


def _walk(value, path: str):
    if isinstance(value, Parameter):
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{path}.{i}")


def conv_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0, dilation: int = 1) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def same_padding(kernel: int, dilation: int = 1) -> int:
    """Padding that preserves spatial size at stride 1 (odd kernels only)."""
    if kernel % 2 == 0:
        raise ValueError(f"'same' padding needs an odd kernel, got {kernel}")
    return dilation * (kernel - 1) // 2


def _uniform(rng: np.random.Generator, shape, bound: float, dtype) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# -- convolution --------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """Direct 2-D cross-correlation via im2col; differentiable in x, weight, bias."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d: expected (n,c,h,w) input, got {x.shape}")
    n, c, h, w = x.shape
    co, ci, kh, kw = weight.shape
    if c != ci:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {ci}")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"conv2d: no complete window for input {h}x{w} with kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}, dilation {dilation}")

    p, s, d = padding, stride, dilation
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i * d:i * d + s * (ho - 1) + 1:s, j * d:j * d + s * (wo - 1) + 1:s]
    cols2 = cols.reshape(n, c * kh * kw, ho * wo)
    w2 = weight.data.reshape(co, -1)
    out = np.matmul(w2, cols2)
    if bias is not None:
        out += bias.data.reshape(1, co, 1)
    out = out.reshape(n, co, ho, wo)

    def backward(g):
        g2 = g.reshape(n, co, ho * wo)
        gw = np.tensordot(g2, cols2, axes=([0, 2], [0, 2])).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i * d:i * d + s * (ho - 1) + 1:s, j * d:j * d + s * (wo - 1) + 1:s] += gcols[:, :, i, j]
            gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=(0, 2)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, parents, backward)


def conv_transpose2x2(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Transposed convolution with kernel == stride (non-overlapping scatter).

    ``weight`` has shape (in, out, k, k); output is (n, out, k*h, k*w).
    """
    if x.ndim != 4:
        raise DimensionError(f"conv_transpose: expected (n,c,h,w) input, got {x.shape}")
    n, c, h, w = x.shape
    ci, co, k, k2 = weight.shape
    if c != ci:
        raise DimensionError(f"conv_transpose: input has {c} channels, weight expects {ci}")
    xd, wd = x.data, weight.data
    # (n,h,w,co,a,b) -> (n,co,h,a,w,b)
    out = np.tensordot(xd, wd, axes=([1], [0])).transpose(0, 3, 1, 4, 2, 5).reshape(n, co, h * k, w * k2)
    if bias is not None:
        out += bias.data.reshape(1, co, 1, 1)

    def backward(g):
        g6 = g.reshape(n, co, h, k, w, k2).transpose(0, 2, 4, 1, 3, 5)
        gx = np.tensordot(g6, wd, axes=([3, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(xd, g6, axes=([0, 2, 3], [0, 1, 2]))
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(np.ascontiguousarray(out), parents, backward)


class Conv2d(Module):
    """2-D convolution; ``padding="same"`` derives P from the size formula."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 padding: int | str = 0, dilation: int = 1, bias: bool = True,
                 rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE):
        rng = rng if rng is not None else np.random.default_rng(0)
        if padding == "same":
            padding = same_padding(kernel_size, dilation)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = int(padding)
        self.dilation = dilation
        bound = math.sqrt(1.0 / (in_channels * kernel_size * kernel_size))
        self.weight = Parameter(_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), bound, dtype))
        self.bias = Parameter(_uniform(rng, (out_channels,), bound, dtype)) if bias else None

    def output_size(self, size: int) -> int:
        return conv_output_size(size, self.kernel_size, self.stride, self.padding, self.dilation)

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class TransposedConv2d(Module):
    """2x2 stride-2 deconvolution: exactly doubles both spatial dims.

    ``init="replicate"`` starts as a channel-diagonal kernel of ones, i.e.
    every input pixel copied into its 2x2 output block (the interpolation
    kernel for non-overlapping 2x support); ``init="uniform"`` uses fan-in
    scaled noise.
    """

    kernel_size = 2
    stride = 2

    def __init__(self, channels: int, bias: bool = True, init: str = "replicate",
                 rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        bound = math.sqrt(1.0 / (channels * 4))
        if init == "replicate":
            w = np.zeros((channels, channels, 2, 2), dtype=dtype)
            w[np.arange(channels), np.arange(channels)] = 1.0
        elif init == "uniform":
            w = _uniform(rng, (channels, channels, 2, 2), bound, dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(channels, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv_transpose2x2(x, self.weight, self.bias)


# -- normalization -------------------------------------------------------------

def default_groups(channels: int) -> int:
    return 8 if channels >= 8 else channels


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    n, c, h, w = x.shape
    if c % groups:
        raise DimensionError(f"group_norm: {c} channels not divisible into {groups} groups")
    xg = x.data.reshape(n, groups, -1)
    mean = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mean) * inv).reshape(n, c, h, w)
    gd = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gd + beta.data.reshape(1, c, 1, 1)

    def backward(g):
        dxhat = (g * gd).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        dx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True) - xh * (dxhat * xh).mean(axis=2, keepdims=True))
        return dx.reshape(n, c, h, w), (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_op(out, (x, gamma, beta), backward)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int | None = None, eps: float = 1e-5, dtype=DEFAULT_DTYPE):
        self.groups = groups if groups is not None else default_groups(channels)
        if channels % self.groups:
            raise DimensionError(f"GroupNorm: {channels} channels not divisible into {self.groups} groups")
        self.eps = eps
        self.weight = Parameter(np.ones(channels, dtype=dtype), decay_exempt=True)
        self.bias = Parameter(np.zeros(channels, dtype=dtype), decay_exempt=True)

    def forward(self, x: Tensor) -> Tensor:
        return group_norm(x, self.groups, self.weight, self.bias, self.eps)


# -- resize --------------------------------------------------------------------

def interp_coords(in_size: int, out_size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel-centre source taps for linear resampling (align_corners=False).

    Returns ``(i0, i1, frac)`` so that ``out[i] = (1-frac)*in[i0] + frac*in[i1]``.
    """
    scale = in_size / out_size
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = src - i0
    return i0, i1, frac


def interp_matrix(in_size: int, out_size: int) -> np.ndarray:
    i0, i1, frac = interp_coords(in_size, out_size)
    m = np.zeros((out_size, in_size))
    rows = np.arange(out_size)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"bilinear_resize: output size must be >= 1, got {out_h}x{out_w}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return make_op(x.data.copy(), (x,), lambda g: (g,))
    ry = interp_matrix(h, out_h).astype(x.dtype)
    rx = interp_matrix(w, out_w).astype(x.dtype)
    out = ry @ x.data @ rx.T
    return make_op(out, (x,), lambda g: (ry.T @ g @ rx,))
