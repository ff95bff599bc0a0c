"""Rasters, the ISPRS palette, the resample-and-crop pipeline, and synthetic scenes.

Images are ``uint8`` arrays of shape (H, W, 3); label maps are ``uint8``
arrays of shape (H, W) holding class indices. Both are stored on disk as
binary PPM (P6), labels through the colour palette.

A dataset directory looks like ``<root>/images/<tile>.ppm`` and
``<root>/labels/<tile>.ppm``; resampling writes ``<root>_s<factor>/`` with
the same layout plus ``manifest.txt``.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DataError, PipelineError
from .layers import interp_coords

PATCH_SIZE = 512
FACTORS = (1.0, 0.75, 0.5, 0.25)

IMP_SURF, BUILDING, LOW_VEG, TREE, CAR, CLUTTER = range(6)

PALETTE = np.array([
    (255, 255, 255),  # impervious surface
    (0, 0, 255),      # building
    (0, 255, 255),    # low vegetation
    (0, 255, 0),      # tree
    (255, 255, 0),    # car
    (255, 0, 0),      # clutter
], dtype=np.uint8)


# -- palette ---------------------------------------------------------------------

def encode_labels(label: np.ndarray) -> np.ndarray:
    """Class-index map -> RGB raster."""
    label = np.asarray(label)
    if label.size and (label.min() < 0 or label.max() >= len(PALETTE)):
        bad = np.argwhere((label < 0) | (label >= len(PALETTE)))[0]
        raise DataError(f"label {label[tuple(bad)]} at {tuple(int(i) for i in bad)} has no palette colour")
    return PALETTE[label.astype(np.intp)]


def decode_labels(rgb: np.ndarray) -> np.ndarray:
    """RGB raster -> class-index map; any colour outside the palette is an error."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DataError(f"expected an (H, W, 3) raster, got shape {rgb.shape}")
    packed = (rgb[..., 0].astype(np.uint32) << 16) | (rgb[..., 1].astype(np.uint32) << 8) | rgb[..., 2]
    keys = (PALETTE[:, 0].astype(np.uint32) << 16) | (PALETTE[:, 1].astype(np.uint32) << 8) | PALETTE[:, 2]
    order = np.argsort(keys)
    pos = np.searchsorted(keys[order], packed)
    pos = np.minimum(pos, len(keys) - 1)
    hit = keys[order][pos] == packed
    if not hit.all():
        r, c = (int(i) for i in np.argwhere(~hit)[0])
        raise DataError(f"colour {tuple(int(v) for v in rgb[r, c])} at ({r}, {c}) is not in the label palette")
    return order[pos].astype(np.uint8)


# -- PPM I/O -----------------------------------------------------------------------

def write_ppm(path: str | Path, image: np.ndarray) -> None:
    image = np.ascontiguousarray(image, dtype=np.uint8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"PPM needs an (H, W, 3) uint8 array, got {image.shape}")
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated PPM header")
        tokens.append(buf[start:pos])
    pos += 1  # single whitespace before the raster
    if tokens[0] != b"P6":
        raise DataError(f"{path}: not a binary PPM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PPM supported (maxval {maxval})")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos) if len(buf) - pos >= w * h * 3 else None
    if data is None:
        raise DataError(f"{path}: raster shorter than {w}x{h}x3 bytes")
    return data.reshape(h, w, 3).copy()


# -- resampling --------------------------------------------------------------------

def resampled_size(size: int, factor: float) -> int:
    return int(math.floor(size * factor + 0.5))


def resize_image(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear (half-pixel centres) resize of a uint8 raster, channel by channel."""
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image.copy()
    y0, y1, fy = interp_coords(h, out_h)
    x0, x1, fx = interp_coords(w, out_w)
    fy = fy.astype(np.float32)[:, None]
    fx = fx.astype(np.float32)[None, :]
    out = np.empty((out_h, out_w) + image.shape[2:], dtype=np.uint8)
    chans = range(image.shape[2]) if image.ndim == 3 else [None]
    for ch in chans:
        src = image[..., ch] if ch is not None else image
        top = src[y0].astype(np.float32)
        rows = top + (src[y1].astype(np.float32) - top) * fy
        del top
        left = rows[:, x0]
        res = left + (rows[:, x1] - left) * fx
        res = np.clip(np.rint(res), 0, 255).astype(np.uint8)
        if ch is None:
            out[...] = res
        else:
            out[..., ch] = res
    return out


def resize_labels(label: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize: each output pixel takes the label under its centre."""
    h, w = label.shape[:2]
    rows = np.minimum(((np.arange(out_h) + 0.5) * (h / out_h)).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * (w / out_w)).astype(np.int64), w - 1)
    return label[rows[:, None], cols[None, :]]


def resample_tile(image: np.ndarray, label: np.ndarray, factor: float,
                  patch: int = PATCH_SIZE) -> tuple[np.ndarray, np.ndarray]:
    if not factor > 0:
        raise PipelineError(f"resample factor must be > 0, got {factor}")
    h, w = label.shape[:2]
    if image.shape[:2] != (h, w):
        raise DataError(f"image {image.shape[:2]} and label {label.shape[:2]} sizes differ")
    oh, ow = resampled_size(h, factor), resampled_size(w, factor)
    if oh < patch or ow < patch:
        raise PipelineError(
            f"tile {h}x{w} at factor {factor} becomes {oh}x{ow}, smaller than the {patch}px patch; "
            f"pad the tile to at least {math.ceil(patch / factor)}px per side before resampling")
    if factor == 1.0:
        return image.copy(), label.copy()
    return resize_image(image, oh, ow), resize_labels(label, oh, ow)


# -- cropping ----------------------------------------------------------------------

def window_starts(size: int, patch: int = PATCH_SIZE) -> list[int]:
    """ceil(size/patch) row-major starts; the last one shifted back to stay in bounds."""
    if size < patch:
        raise PipelineError(f"size {size} is smaller than the {patch}px patch")
    n = -(-size // patch)
    return [min(i * patch, size - patch) for i in range(n)]


def format_factor(factor: float) -> str:
    return repr(float(factor))


@dataclass(frozen=True)
class Window:
    tile_id: str
    scale: float
    x0: int
    y0: int
    w: int
    h: int

    def line(self) -> str:
        return f"{self.tile_id} {format_factor(self.scale)} {self.x0} {self.y0} {self.w} {self.h}"


@dataclass
class PatchManifest:
    windows: list[Window] = field(default_factory=list)
    # tile id -> ((src_h, src_w), (resampled_h, resampled_w))
    tiles: dict[str, tuple[tuple[int, int], tuple[int, int]]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.windows)

    def extend(self, other: "PatchManifest") -> None:
        self.windows.extend(other.windows)
        self.tiles.update(other.tiles)

    def to_text(self) -> str:
        lines = [f"# tile {tid} {s[0]} {s[1]} {r[0]} {r[1]}" for tid, (s, r) in self.tiles.items()]
        lines.extend(w.line() for w in self.windows)
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def read(cls, path: str | Path) -> "PatchManifest":
        man = cls()
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            parts = raw.split()
            if not parts:
                continue
            try:
                if parts[0] == "#":
                    if parts[1] == "tile":
                        tid, sh, sw, rh, rw = parts[2], *map(int, parts[3:7])
                        man.tiles[tid] = ((sh, sw), (rh, rw))
                    continue
                tid, scale, x0, y0, w, h = parts
                man.windows.append(Window(tid, float(scale), int(x0), int(y0), int(w), int(h)))
            except (ValueError, IndexError):
                raise DataError(f"{path}:{lineno}: malformed manifest line {raw!r}") from None
        return man


def crop_patches(tile_dims: tuple[int, int], factor: float, tile_id: str = "tile",
                 patch: int = PATCH_SIZE) -> PatchManifest:
    """Windows covering one tile after resampling by ``factor``."""
    if not factor > 0:
        raise PipelineError(f"resample factor must be > 0, got {factor}")
    h, w = tile_dims
    rh, rw = resampled_size(h, factor), resampled_size(w, factor)
    if rh < patch or rw < patch:
        raise PipelineError(
            f"tile {tile_id} ({h}x{w}) at factor {factor} becomes {rh}x{rw}, smaller than the {patch}px patch; "
            f"pad it to at least {math.ceil(patch / factor)}px per side")
    windows = [Window(tile_id, float(factor), x0, y0, patch, patch)
               for y0 in window_starts(rh, patch) for x0 in window_starts(rw, patch)]
    return PatchManifest(windows=windows, tiles={tile_id: ((h, w), (rh, rw))})


def count_patches(tile_dims: Iterable[tuple[int, int]], factor: float, patch: int = PATCH_SIZE) -> int:
    return sum(len(crop_patches(d, factor, f"t{i}", patch)) for i, d in enumerate(tile_dims))


def extract_window(array: np.ndarray, win: Window) -> np.ndarray:
    return array[win.y0:win.y0 + win.h, win.x0:win.x0 + win.w]


# -- dataset directories ----------------------------------------------------------------

def resampled_root(root: str | Path, factor: float) -> Path:
    root = Path(root)
    return root.with_name(f"{root.name}_s{format_factor(factor)}")


def write_tile(root: str | Path, tile_id: str, image: np.ndarray, label: np.ndarray) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    write_ppm(root / "images" / f"{tile_id}.ppm", image)
    write_ppm(root / "labels" / f"{tile_id}.ppm", encode_labels(label))


def list_tiles(root: str | Path) -> list[str]:
    img_dir = Path(root) / "images"
    if not img_dir.is_dir():
        raise DataError(f"{root}: no images/ directory")
    return sorted(p.stem for p in img_dir.glob("*.ppm"))


def read_tile(root: str | Path, tile_id: str) -> tuple[np.ndarray, np.ndarray]:
    root = Path(root)
    image = read_ppm(root / "images" / f"{tile_id}.ppm")
    label = decode_labels(read_ppm(root / "labels" / f"{tile_id}.ppm"))
    if image.shape[:2] != label.shape:
        raise DataError(f"{tile_id}: image {image.shape[:2]} and label {label.shape} sizes differ")
    return image, label


def resample_dataset(root: str | Path, factor: float, out: str | Path | None = None,
                     patch: int = PATCH_SIZE) -> PatchManifest:
    """Resample every tile under ``root`` and write rasters plus ``manifest.txt``."""
    out = Path(out) if out is not None else resampled_root(root, factor)
    manifest = PatchManifest()
    for tid in list_tiles(root):
        image, label = read_tile(root, tid)
        img2, lab2 = resample_tile(image, label, factor, patch)
        write_tile(out, tid, img2, lab2)
        manifest.extend(crop_patches(label.shape, factor, tid, patch))
    out.mkdir(parents=True, exist_ok=True)
    manifest.write(out / "manifest.txt")
    return manifest


def load_patches(root: str | Path) -> list[tuple[np.ndarray, np.ndarray]]:
    """All manifest windows of a resampled dataset as (image, label) pairs."""
    root = Path(root)
    manifest = PatchManifest.read(root / "manifest.txt")
    cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    out = []
    for win in manifest.windows:
        if win.tile_id not in cache:
            cache[win.tile_id] = read_tile(root, win.tile_id)
        image, label = cache[win.tile_id]
        out.append((extract_window(image, win).copy(), extract_window(label, win).copy()))
    return out


def crop_arrays(image: np.ndarray, label: np.ndarray, patch: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """In-memory grid crop of one (already resampled) tile."""
    h, w = label.shape
    return [(image[y:y + patch, x:x + patch], label[y:y + patch, x:x + patch])
            for y in window_starts(h, patch) for x in window_starts(w, patch)]


# -- synthetic scenes ------------------------------------------------------------------

# base colour per class and per-pixel texture noise (std, grey levels)
_CLASS_COLOUR = np.array([
    (150, 150, 145),
    (185, 120, 100),
    (110, 170, 80),
    (45, 105, 50),
    (0, 0, 0),  # cars get a per-object colour
    (120, 80, 140),
], dtype=np.float32)
_CLASS_NOISE = np.array([8, 8, 10, 22, 6, 18], dtype=np.float32)
_CAR_COLOURS = np.array([(230, 230, 235), (30, 30, 35), (200, 30, 30), (40, 60, 190), (220, 200, 40)],
                        dtype=np.float32)


@dataclass(frozen=True)
class SyntheticSceneSpec:
    """Object grammar for one synthetic aerial tile (sizes in full-resolution pixels)."""

    seed: int = 0
    size: int = 512
    building_size: tuple[int, int] = (40, 140)
    car_size: tuple[int, int] = (6, 14)
    tree_radius: tuple[int, int] = (8, 28)
    road_width: tuple[int, int] = (16, 36)
    clutter_size: tuple[int, int] = (10, 30)
    texture_noise: float = 1.0
    scales: tuple[float, ...] = (1.0,)
    min_patch: int | None = PATCH_SIZE

    def __post_init__(self):
        if self.min_patch is not None:
            for f in self.scales:
                if resampled_size(self.size, f) < self.min_patch:
                    raise PipelineError(
                        f"canvas {self.size} at scale {f} is below the {self.min_patch}px patch size")


def _rand_range(rng, lo_hi) -> int:
    lo, hi = lo_hi
    return int(rng.integers(lo, hi + 1))


def _render_labels(spec: SyntheticSceneSpec, rng: np.random.Generator,
                   colour: np.ndarray) -> np.ndarray:
    s = spec.size
    label = np.full((s, s), LOW_VEG, dtype=np.uint8)
    area_units = max(1.0, (s / 512.0) ** 2)
    per_side = max(1.0, s / 512.0)

    # per-object colour jitter is written straight into `colour` (H, W, 3 float32)
    def paint(mask_slice, cls, jitter=18.0, rgb=None):
        label[mask_slice] = cls
        base = _CLASS_COLOUR[cls] if rgb is None else rgb
        colour[mask_slice] = base + rng.uniform(-jitter, jitter, size=3).astype(np.float32)

    n_buildings = int(rng.poisson(7 * area_units)) + 1
    for _ in range(n_buildings):
        bh, bw = _rand_range(rng, spec.building_size), _rand_range(rng, spec.building_size)
        y, x = int(rng.integers(0, max(1, s - bh))), int(rng.integers(0, max(1, s - bw)))
        paint((slice(y, y + bh), slice(x, x + bw)), BUILDING, jitter=25.0)

    n_trees = int(rng.poisson(14 * area_units)) + 1
    for _ in range(n_trees):
        r = _rand_range(rng, spec.tree_radius)
        cy, cx = int(rng.integers(0, s)), int(rng.integers(0, s))
        y0, y1, x0, x1 = max(0, cy - r), min(s, cy + r + 1), max(0, cx - r), min(s, cx + r + 1)
        yy, xx = np.ogrid[y0:y1, x0:x1]
        disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        sub_l = label[y0:y1, x0:x1]
        sub_c = colour[y0:y1, x0:x1]
        sub_l[disk] = TREE
        sub_c[disk] = _CLASS_COLOUR[TREE] + rng.uniform(-12, 12, size=3).astype(np.float32)

    roads = []
    n_roads = max(1, int(rng.poisson(2 * per_side)))
    for r in range(n_roads):
        width = _rand_range(rng, spec.road_width)
        pos = int(rng.integers(0, max(1, s - width)))
        vertical = (r % 2 == 1) if n_roads > 1 else bool(rng.integers(0, 2))
        sl = (slice(None), slice(pos, pos + width)) if vertical else (slice(pos, pos + width), slice(None))
        paint(sl, IMP_SURF, jitter=8.0)
        roads.append((vertical, pos, width))

    for vertical, pos, width in roads:
        n_cars = int(rng.poisson(3 * per_side)) + 1
        for _ in range(n_cars):
            length = _rand_range(rng, spec.car_size)
            breadth = max(3, min(width - 2, int(round(length * 0.5))))
            along = int(rng.integers(0, max(1, s - length)))
            across = pos + int(rng.integers(0, max(1, width - breadth)))
            if vertical:
                sl = (slice(along, along + length), slice(across, across + breadth))
            else:
                sl = (slice(across, across + breadth), slice(along, along + length))
            rgb = _CAR_COLOURS[int(rng.integers(0, len(_CAR_COLOURS)))]
            paint(sl, CAR, jitter=10.0, rgb=rgb)

    n_clutter = int(rng.poisson(3 * area_units)) + 1
    for _ in range(n_clutter):
        ch, cw = _rand_range(rng, spec.clutter_size), _rand_range(rng, spec.clutter_size)
        y, x = int(rng.integers(0, max(1, s - ch))), int(rng.integers(0, max(1, s - cw)))
        paint((slice(y, y + ch), slice(x, x + cw)), CLUTTER, jitter=20.0)
    return label


def render_scene(spec: SyntheticSceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Full-resolution (image, label) pair; identical spec -> identical bytes."""
    rng = np.random.default_rng(spec.seed)
    s = spec.size
    colour = np.empty((s, s, 3), dtype=np.float32)
    colour[...] = _CLASS_COLOUR[LOW_VEG]
    label = _render_labels(spec, rng, colour)
    noise_std = (_CLASS_NOISE * np.float32(spec.texture_noise))[label]
    for ch in range(3):
        noise = rng.standard_normal((s, s), dtype=np.float32)
        noise *= noise_std
        colour[..., ch] += noise
    del noise_std
    image = np.empty((s, s, 3), dtype=np.uint8)
    for ch in range(3):
        image[..., ch] = np.clip(np.rint(colour[..., ch]), 0, 255)
    return image, label


def generate_scene(spec: SyntheticSceneSpec) -> dict[float, tuple[np.ndarray, np.ndarray]]:
    """Render once at full resolution, then resample to each requested scale."""
    image, label = render_scene(spec)
    patch = spec.min_patch if spec.min_patch is not None else 1
    return {f: resample_tile(image, label, f, patch=patch) for f in spec.scales}


def class_histogram(label: np.ndarray, num_classes: int = 6) -> np.ndarray:
    return np.bincount(np.asarray(label).ravel(), minlength=num_classes)


# -- augmentation -------------------------------------------------------------------

def augment_flip(image: np.ndarray, label: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    """Independent horizontal and vertical flips, each with probability 0.5.

    ``image`` is (H, W, ...) and ``label`` (H, W); both get the same flips.
    """
    if rng.random() < 0.5:
        image, label = image[:, ::-1], label[:, ::-1]
    if rng.random() < 0.5:
        image, label = image[::-1], label[::-1]
    return np.ascontiguousarray(image), np.ascontiguousarray(label)


def dataset_digest(root: str | Path) -> str:
    """SHA-256 over every file under ``root`` (relative path + bytes), in sorted order."""
    h = hashlib.sha256()
    root = Path(root)
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def is_nonempty_dir(path: str | Path) -> bool:
    return os.path.isdir(path) and any(os.scandir(path))
