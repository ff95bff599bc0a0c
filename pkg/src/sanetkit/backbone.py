"""Micro residual backbone emitting four pyramid features at strides 4, 8, 16, 16."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .layers import Conv2d, GroupNorm, Module
from .tensor import DEFAULT_DTYPE, Tensor, add, relu

#: Output stride of each stage relative to the input image.
STAGE_STRIDES = (4, 8, 16, 16)
#: Height and width of the input must be multiples of this.
INPUT_MULTIPLE = 32


@dataclass(frozen=True)
class BackboneConfig:
    stem_channels: int = 16
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    blocks_per_stage: int = 1
    input_channels: int = 3

    def __post_init__(self):
        if len(self.stage_channels) != 4:
            raise ConfigError(f"stage_channels needs 4 entries, got {self.stage_channels}")
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be >= 1")

    @property
    def out_channels(self) -> int:
        """Channels of the last stage (the attention input width)."""
        return self.stage_channels[3]

    @classmethod
    def full_width(cls) -> "BackboneConfig":
        return cls(stem_channels=64, stage_channels=(256, 512, 1024, 2048))


@dataclass
class PyramidFeatures:
    """Backbone outputs plus the recalibrated features filled in downstream."""

    resblock: list[Tensor]
    rf: list[Tensor | None] = field(default_factory=lambda: [None] * 4)

    def sizes(self) -> list[tuple[int, int]]:
        return [t.shape[-2:] for t in self.resblock]


class BasicBlock(Module):
    """Two 3x3 convs with group norm and a (projected when needed) skip."""

    def __init__(self, in_ch, out_ch, stride=1, dilation=1, rng=None, dtype=DEFAULT_DTYPE):
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride=stride, padding=dilation, dilation=dilation,
                            bias=False, rng=rng, dtype=dtype)
        self.norm1 = GroupNorm(out_ch, dtype=dtype)
        self.conv2 = Conv2d(out_ch, out_ch, 3, padding=dilation, dilation=dilation,
                            bias=False, rng=rng, dtype=dtype)
        self.norm2 = GroupNorm(out_ch, dtype=dtype)
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv2d(in_ch, out_ch, 1, stride=stride, bias=False, rng=rng, dtype=dtype)
            self.proj_norm = GroupNorm(out_ch, dtype=dtype)
        else:
            self.proj = None
            self.proj_norm = None

    def forward(self, x: Tensor) -> Tensor:
        y = relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        skip = x if self.proj is None else self.proj_norm(self.proj(x))
        return relu(add(y, skip))


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig = BackboneConfig(), rng: np.random.Generator | None = None,
                 dtype=DEFAULT_DTYPE):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        s = cfg.stem_channels
        self.stem1 = Conv2d(cfg.input_channels, s, 3, stride=2, padding=1, bias=False, rng=rng, dtype=dtype)
        self.stem1_norm = GroupNorm(s, dtype=dtype)
        self.stem2 = Conv2d(s, s, 3, stride=2, padding=1, bias=False, rng=rng, dtype=dtype)
        self.stem2_norm = GroupNorm(s, dtype=dtype)
        # stage 4 trades its stride for dilation so it stays at 1/16
        strides = (1, 2, 2, 1)
        dilations = (1, 1, 1, 2)
        self.stages: list[list[BasicBlock]] = []
        in_ch = s
        for out_ch, st, dil in zip(cfg.stage_channels, strides, dilations):
            blocks = []
            for b in range(cfg.blocks_per_stage):
                blocks.append(BasicBlock(in_ch, out_ch, stride=st if b == 0 else 1, dilation=dil,
                                         rng=rng, dtype=dtype))
                in_ch = out_ch
            self.stages.append(blocks)

    def forward(self, image: Tensor) -> PyramidFeatures:
        check_input_size(image.shape[-2:])
        if image.shape[1] != self.cfg.input_channels:
            raise ConfigError(f"expected {self.cfg.input_channels} input channels, got {image.shape[1]}")
        x = relu(self.stem1_norm(self.stem1(image)))
        x = relu(self.stem2_norm(self.stem2(x)))
        feats = []
        for blocks in self.stages:
            for block in blocks:
                x = block(x)
            feats.append(x)
        return PyramidFeatures(resblock=feats)


def check_input_size(hw) -> None:
    h, w = hw
    if h % INPUT_MULTIPLE or w % INPUT_MULTIPLE:
        raise ConfigError(f"input height and width must be multiples of {INPUT_MULTIPLE}, got {h}x{w}")
