"""Densely connected feature pyramid: large field connections plus weighted top-down fusion."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DimensionError
from .layers import Conv2d, Module, TransposedConv2d, bilinear_resize
from .tensor import DEFAULT_DTYPE, Parameter, Tensor, add, relu, scale, softmax_lastdim, take

LAYERS = (1, 2, 3)


def dilation_rate(i: int) -> int:
    """Dilation of the large-field conv feeding pyramid layer ``i``: 18, 12, 6."""
    _check_layer(i)
    return 24 - 6 * i


def deconv_repeats(i: int) -> int:
    """Number of 2x deconvolutions lifting RF4's 1/16 grid to layer ``i``."""
    _check_layer(i)
    return 3 - i


def _check_layer(i) -> None:
    if i not in LAYERS:
        raise ValueError(f"pyramid layer index must be one of {LAYERS}, got {i!r}")


class LargeFieldConnection(Module):
    """Dilated 3x3 conv (+bias, relu) on RF4, then ``3 - i`` 2x deconvolutions."""

    def __init__(self, i: int, channels: int, rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.index = i
        r = dilation_rate(i)
        self.dilated_conv = Conv2d(channels, channels, 3, padding="same", dilation=r, rng=rng, dtype=dtype)
        self.deconvs = [TransposedConv2d(channels, rng=rng, dtype=dtype) for _ in range(deconv_repeats(i))]

    @property
    def receptive_field(self) -> int:
        conv = self.dilated_conv
        return conv.dilation * (conv.kernel_size - 1) + 1

    def forward(self, rf4: Tensor) -> Tensor:
        y = relu(self.dilated_conv(rf4))
        for deconv in self.deconvs:
            y = deconv(y)
        return y


def large_field(rf4: Tensor, i: int, connection: LargeFieldConnection) -> Tensor:
    _check_layer(i)
    if connection.index != i:
        raise ValueError(f"connection was built for layer {connection.index}, not {i}")
    return connection(rf4)


class FusionWeights(Module):
    """Softmax-normalised (alpha1, alpha2, alpha3) for one fusion site."""

    def __init__(self, dtype=DEFAULT_DTYPE):
        self.logits = Parameter(np.zeros(3, dtype=dtype), decay_exempt=True)

    def tensor(self) -> Tensor:
        return softmax_lastdim(self.logits)

    def values(self) -> np.ndarray:
        z = self.logits.data - self.logits.data.max()
        e = np.exp(z)
        return e / e.sum()


def fuse_layer(rf_next: Tensor, resblock_i: Tensor, lf_i: Tensor, weights: FusionWeights,
               lateral: Conv2d) -> Tensor:
    """alpha1 * resize(rf_next) + alpha2 * lateral(resblock_i) + alpha3 * lf_i."""
    if resblock_i.shape[-2:] != lf_i.shape[-2:]:
        raise DimensionError(
            f"fuse_layer: large-field feature {lf_i.shape[-2:]} does not match resblock {resblock_i.shape[-2:]}")
    h, w = lf_i.shape[-2:]
    a = weights.tensor()
    top = bilinear_resize(rf_next, h, w)
    side = lateral(resblock_i)
    out = add(scale(top, take(a, 0)), scale(side, take(a, 1)))
    return add(out, scale(lf_i, take(a, 2)))


def scale_aware_feature(rf: Sequence[Tensor]) -> Tensor:
    """Unweighted sum of RF1..RF4 on RF1's grid (coarser maps bilinearly upsampled)."""
    base = rf[0]
    c = base.shape[1]
    h, w = base.shape[-2:]
    out = base
    for t in rf[1:]:
        if t.shape[1] != c:
            raise DimensionError(f"scale_aware_feature: channel mismatch {t.shape[1]} vs {c}")
        out = add(out, bilinear_resize(t, h, w))
    return out


class DCFPN(Module):
    def __init__(self, resblock_channels: Sequence[int], channels: int,
                 rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.connections = [LargeFieldConnection(i, channels, rng=rng, dtype=dtype) for i in LAYERS]
        self.laterals = [Conv2d(resblock_channels[i - 1], channels, 1, rng=rng, dtype=dtype) for i in LAYERS]
        self.fusion = [FusionWeights(dtype=dtype) for _ in LAYERS]

    def forward(self, resblocks: Sequence[Tensor], rf4: Tensor) -> list[Tensor]:
        """Return [RF1, RF2, RF3, RF4], fusing top-down from layer 3."""
        rf: list[Tensor | None] = [None, None, None, rf4]
        for i in reversed(LAYERS):
            lf = self.connections[i - 1](rf4)
            rf[i - 1] = fuse_layer(rf[i], resblocks[i - 1], lf, self.fusion[i - 1], self.laterals[i - 1])
        return rf
