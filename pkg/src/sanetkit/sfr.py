"""Spatial feature recalibration: dual-branch global spatial attention over ResBlock4."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError
from .layers import Conv2d, Module, TransposedConv2d
from .tensor import (DEFAULT_DTYPE, Parameter, Tensor, add, matmul, reshape, scale, sigmoid,
                     softmax_lastdim, transpose)


def attention_map(x: Tensor) -> Tensor:
    """Row-stochastic (n, hw, hw) map: row j holds position j's weights over all positions.

    Logits are raw dot products between channel vectors, with no
    temperature scaling.
    """
    n, c, h, w = x.shape
    values = reshape(x, (n, c, h * w))             # C' x HW
    queries = transpose(values, (0, 2, 1))         # HW x C'
    return softmax_lastdim(matmul(queries, values))


def spatial_function(x: Tensor) -> Tensor:
    """Global spatial recalibration of a (n, C', h, w) map; output has the same shape."""
    n, c, h, w = x.shape
    values = reshape(x, (n, c, h * w))
    attn = attention_map(x)
    # out[:, j] = sum_i values[:, i] * attn[j, i]
    out = matmul(values, transpose(attn, (0, 2, 1)))
    return reshape(out, (n, c, h, w))


class SFR(Module):
    """Two-branch recalibration producing RF4 at ResBlock4's spatial size.

    Branch 1 is a 1x1 stride-1 conv, branch 2 a 3x3 stride-2 conv whose
    attention output is restored to full size by a 2x2 deconvolution. The
    branches are mixed with ``alpha = sigmoid(alpha_logit)``.
    """

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator | None = None,
                 dtype=DEFAULT_DTYPE):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.branch1_conv = Conv2d(in_channels, out_channels, 1, stride=1, rng=rng, dtype=dtype)
        self.branch2_conv = Conv2d(in_channels, out_channels, 3, stride=2, padding=1, rng=rng, dtype=dtype)
        self.theta_deconv = TransposedConv2d(out_channels, rng=rng, dtype=dtype)
        self.alpha_logit = Parameter(np.zeros(1, dtype=dtype), decay_exempt=True)

    @property
    def alpha(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.alpha_logit.data[0])))

    def branches(self, resblock4: Tensor) -> tuple[Tensor, Tensor]:
        h, w = resblock4.shape[-2:]
        if h % 2 or w % 2:
            raise DimensionError(f"SFR needs even spatial dims, got {h}x{w}")
        return self.branch1_conv(resblock4), self.branch2_conv(resblock4)

    def forward(self, resblock4: Tensor) -> Tensor:
        x1, x2 = self.branches(resblock4)
        f1 = spatial_function(x1)
        f2 = self.theta_deconv(spatial_function(x2))
        alpha = sigmoid(self.alpha_logit)
        one_minus_alpha = sigmoid(scale(self.alpha_logit, -1.0))
        return add(scale(f1, alpha), scale(f2, one_minus_alpha))
