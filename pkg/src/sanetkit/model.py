"""SaNet and its ablation variants, plus the binary checkpoint format.

Checkpoint layout (all integers little-endian u32)::

    b"SANETKIT" | version | value width in bytes (4 or 8) | entry count
    then per entry: name length | utf-8 name | rank | dims... | raw values
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .backbone import Backbone, BackboneConfig, PyramidFeatures, check_input_size
from .dcfpn import DCFPN, scale_aware_feature
from .errors import CheckpointError, ConfigError
from .layers import Conv2d, GroupNorm, Module, bilinear_resize
from .sfr import SFR
from .tensor import DEFAULT_DTYPE, Tensor, relu

VARIANTS = {
    "baseline": (False, False),
    "sfr": (True, False),
    "dcfpn": (False, True),
    "sanet": (True, True),
}

CHECKPOINT_MAGIC = b"SANETKIT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    c_prime: int = 32
    num_classes: int = 6
    use_sfr: bool = True
    use_dcfpn: bool = True

    def __post_init__(self):
        if self.c_prime < 1 or self.num_classes < 2:
            raise ConfigError("c_prime must be >= 1 and num_classes >= 2")

    @classmethod
    def variant(cls, name: str, **kwargs) -> "ModelConfig":
        try:
            use_sfr, use_dcfpn = VARIANTS[name]
        except KeyError:
            raise ConfigError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}") from None
        return cls(use_sfr=use_sfr, use_dcfpn=use_dcfpn, **kwargs)

    @property
    def variant_name(self) -> str:
        return {v: k for k, v in VARIANTS.items()}[(self.use_sfr, self.use_dcfpn)]

    def with_variant(self, name: str) -> "ModelConfig":
        use_sfr, use_dcfpn = VARIANTS[name]
        return replace(self, use_sfr=use_sfr, use_dcfpn=use_dcfpn)


class Head(Module):
    """3x3 conv + group norm + relu, then 1x1 classifier."""

    def __init__(self, channels: int, num_classes: int, rng=None, dtype=DEFAULT_DTYPE):
        self.conv = Conv2d(channels, channels, 3, padding="same", bias=False, rng=rng, dtype=dtype)
        self.norm = GroupNorm(channels, dtype=dtype)
        self.classifier = Conv2d(channels, num_classes, 1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.classifier(relu(self.norm(self.conv(x))))


class SaNet(Module):
    """Backbone -> (SFR | 1x1 projection) -> (DCFPN + scale-aware sum) -> head -> upsample."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0, dtype=DEFAULT_DTYPE):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        bcfg = cfg.backbone
        self.backbone = Backbone(bcfg, rng=rng, dtype=dtype)
        if cfg.use_sfr:
            self.sfr = SFR(bcfg.out_channels, cfg.c_prime, rng=rng, dtype=dtype)
            self.proj = None
        else:
            self.sfr = None
            self.proj = Conv2d(bcfg.out_channels, cfg.c_prime, 1, rng=rng, dtype=dtype)
        self.dcfpn = DCFPN(bcfg.stage_channels[:3], cfg.c_prime, rng=rng, dtype=dtype) if cfg.use_dcfpn else None
        self.head = Head(cfg.c_prime, cfg.num_classes, rng=rng, dtype=dtype)
        self.assign_names()

    def features(self, image: Tensor) -> PyramidFeatures:
        feats = self.backbone(image)
        r4 = feats.resblock[3]
        rf4 = self.sfr(r4) if self.sfr is not None else self.proj(r4)
        if self.dcfpn is not None:
            feats.rf = self.dcfpn(feats.resblock, rf4)
        else:
            feats.rf = [None, None, None, rf4]
        return feats

    def forward(self, image: Tensor) -> Tensor:
        check_input_size(image.shape[-2:])
        h, w = image.shape[-2:]
        feats = self.features(image)
        top = scale_aware_feature(feats.rf) if self.dcfpn is not None else feats.rf[3]
        return bilinear_resize(self.head(top), h, w)

    def census(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(name, p.shape) for name, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def save_checkpoint(model: Module, path: str | Path) -> None:
    params = list(model.named_parameters())
    dtype = params[0][1].dtype if params else np.dtype(DEFAULT_DTYPE)
    width = np.dtype(dtype).itemsize
    le = np.dtype(dtype).newbyteorder("<")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<III", CHECKPOINT_VERSION, width, len(params))]
    for name, p in params:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype=le).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path: str | Path) -> list[tuple[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a sanetkit checkpoint (bad magic)")
    try:
        version, width, count = struct.unpack_from("<III", buf, 8)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        if width not in (4, 8):
            raise CheckpointError(f"{path}: unsupported value width {width}")
        dtype = np.dtype("<f4" if width == 4 else "<f8")
        off = 20
        entries = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            nbytes = int(np.prod(dims)) * width
            if off + nbytes > len(buf):
                raise CheckpointError(f"{path}: truncated data for {name!r}")
            arr = np.frombuffer(buf, dtype=dtype, count=int(np.prod(dims)), offset=off).reshape(dims)
            off += nbytes
            entries.append((name, arr.astype(dtype.newbyteorder("="))))
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from None
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return entries


def load_checkpoint(model: SaNet, path: str | Path) -> None:
    """Load weights in place after checking the name/shape census entry by entry."""
    entries = read_checkpoint(path)
    params = list(model.named_parameters())
    for idx, (name, p) in enumerate(params):
        if idx >= len(entries):
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        got_name, arr = entries[idx]
        if got_name != name:
            raise CheckpointError(f"parameter {idx}: expected {name!r}, checkpoint has {got_name!r}")
        if arr.shape != p.shape:
            raise CheckpointError(f"parameter {name!r}: expected shape {p.shape}, checkpoint has {arr.shape}")
    if len(entries) > len(params):
        raise CheckpointError(f"checkpoint has unexpected parameter {entries[len(params)][0]!r}")
    for (_, p), (_, arr) in zip(params, entries):
        p.data[...] = arr
