"""Image/mask representation, resampling, mask synthesis and pyramid construction.

Everything in this module is pure numpy: images are float32 HWC arrays in
[-1, 1], masks are uint8 HW arrays in {0, 1} where 1 marks a corrupted
(to-be-inpainted) pixel. All generators are bit-deterministic for a fixed
seed and safe to call from parallel workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, ShapeError

__all__ = [
    "RasterImage",
    "HoleMask",
    "PyramidSample",
    "BrushConfig",
    "load_image",
    "save_image",
    "load_mask",
    "save_mask",
    "gen_center_mask",
    "gen_freeform_mask",
    "mask_hole_ratio",
    "build_pyramid",
    "downsample",
    "upsample",
    "downsample_mask",
]


@dataclass(frozen=True)
class RasterImage:
    """A float image plane, HWC, values normalized to [-1, 1]."""

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 3:
            raise ShapeError(f"image must be HWC, got shape {v.shape}")
        if v.dtype != np.float32:
            object.__setattr__(self, "values", v.astype(np.float32))
            v = self.values
        if not np.isfinite(v).all():
            raise ValueError("image contains non-finite values")
        if v.min() < -1.0 - 1e-5 or v.max() > 1.0 + 1e-5:
            raise ValueError(
                f"image values outside [-1, 1]: range [{v.min()}, {v.max()}]"
            )

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class HoleMask:
    """Binary corruption mask, HW, 1 = corrupted pixel, 0 = known pixel."""

    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise ShapeError(f"mask must be HW, got shape {v.shape}")
        if v.dtype != np.uint8:
            object.__setattr__(self, "values", v.astype(np.uint8))
            v = self.values
        bad = (v != 0) & (v != 1)
        if bad.any():
            raise ValueError("mask must be strictly binary {0, 1}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class PyramidSample:
    """Aligned multi-resolution stack of (image, mask) pairs.

    Index 0 is the coarsest level; each level doubles the previous one's
    height and width. Masks stay binary at every level. Note that binary
    re-thresholding at coarse levels quantizes the hole area, so the
    per-level hole ratio tracks the top level's only up to discretization
    (tight for centered squares at adequate resolution, looser for thin
    free-form strokes).
    """

    levels: tuple
    scale_factor: int = 2

    def __post_init__(self):
        if len(self.levels) < 1:
            raise ConfigError("pyramid needs at least one level")
        for n, (img, mask) in enumerate(self.levels):
            if (img.height, img.width) != (mask.height, mask.width):
                raise ShapeError(f"level {n}: image/mask size mismatch")
            if n > 0:
                prev_img = self.levels[n - 1][0]
                if img.height != self.scale_factor * prev_img.height or (
                    img.width != self.scale_factor * prev_img.width
                ):
                    raise ShapeError(
                        f"level {n} must be {self.scale_factor}x level {n - 1}"
                    )

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def top(self):
        return self.levels[-1]


def _default_range(lo: float, hi: float) -> tuple:
    return (float(lo), float(hi))


@dataclass(frozen=True)
class BrushConfig:
    """Parameters of the free-form brush-stroke mask generator.

    Strokes are random vertex walks with bounded turn angles, drawn with a
    round brush. Ranges are inclusive. Defaults scale with the canvas size
    via :meth:`default_for`.
    """

    min_strokes: int = 1
    max_strokes: int = 4
    min_vertices: int = 4
    max_vertices: int = 12
    angle_spread: float = math.radians(40.0)
    segment_length: tuple = field(default_factory=lambda: _default_range(8.0, 32.0))
    brush_width: tuple = field(default_factory=lambda: _default_range(4.0, 16.0))

    def __post_init__(self):
        if self.min_strokes < 0 or self.max_strokes < self.min_strokes:
            raise ConfigError("stroke count range is empty")
        if self.min_vertices < 1 or self.max_vertices < self.min_vertices:
            raise ConfigError("vertex count range is empty")
        if self.angle_spread < 0:
            raise ConfigError("angle_spread must be non-negative")
        if self.segment_length[1] < self.segment_length[0] or self.segment_length[0] <= 0:
            raise ConfigError("segment_length range is empty")
        if self.brush_width[1] < self.brush_width[0] or self.brush_width[0] < 1.0:
            raise ConfigError("brush_width range is empty or below 1 pixel")

    @classmethod
    def default_for(cls, size: int) -> "BrushConfig":
        """Default brush scaled to a size x size canvas."""
        return cls(
            segment_length=(size / 16.0, size / 4.0),
            brush_width=(max(1.0, size / 32.0), max(1.0, size / 8.0)),
        )


def load_image(path, target_size: int) -> RasterImage:
    """Load an 8-bit image, resize the shorter side to ``target_size``,
    center-crop to a square, and normalize to [-1, 1]."""
    if target_size < 1:
        raise ConfigError(f"target_size must be positive, got {target_size}")
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot decode image at {path}: {exc}") from exc
    w, h = im.size
    scale = target_size / min(w, h)
    new_w = max(target_size, round(w * scale))
    new_h = max(target_size, round(h * scale))
    im = im.resize((new_w, new_h), Image.BILINEAR)
    left = (new_w - target_size) // 2
    top = (new_h - target_size) // 2
    im = im.crop((left, top, left + target_size, top + target_size))
    arr = np.asarray(im, dtype=np.float32) / 127.5 - 1.0
    return RasterImage(arr)


def save_image(image: RasterImage, path) -> None:
    """Write an image as 8-bit PNG, mapping [-1, 1] back to [0, 255]."""
    arr = np.clip(np.round((image.values + 1.0) * 127.5), 0, 255).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def load_mask(path) -> HoleMask:
    """Read a single-channel PNG mask; any nonzero pixel counts as hole."""
    try:
        with Image.open(path) as im:
            im = im.convert("L")
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot decode mask at {path}: {exc}") from exc
    arr = (np.asarray(im) > 127).astype(np.uint8)
    return HoleMask(arr)


def save_mask(mask: HoleMask, path) -> None:
    """Write a mask as single-channel PNG with values {0, 255}."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.values * np.uint8(255), mode="L").save(path, format="PNG")


def gen_center_mask(size: int, area_ratio: float) -> HoleMask:
    """Centered square hole whose area approximates ``area_ratio`` of the canvas."""
    if not 0.0 < area_ratio < 1.0:
        raise ValueError(f"area_ratio must be in (0, 1), got {area_ratio}")
    side = int(round(math.sqrt(area_ratio) * size))
    side = min(max(side, 1), size)
    top = (size - side) // 2
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[top : top + side, top : top + side] = 1
    return HoleMask(mask)


def _stamp_disk(canvas: np.ndarray, cy: float, cx: float, radius: float) -> None:
    size = canvas.shape[0]
    y0 = max(0, int(math.floor(cy - radius)))
    y1 = min(size, int(math.ceil(cy + radius)) + 1)
    x0 = max(0, int(math.floor(cx - radius)))
    x1 = min(size, int(math.ceil(cx + radius)) + 1)
    if y0 >= y1 or x0 >= x1:
        return
    yy = np.arange(y0, y1, dtype=np.float64)[:, None] - cy
    xx = np.arange(x0, x1, dtype=np.float64)[None, :] - cx
    canvas[y0:y1, x0:x1] |= (yy * yy + xx * xx <= radius * radius)


def gen_freeform_mask(size: int, config: BrushConfig, seed: int) -> HoleMask:
    """Union of thick random polyline strokes with round brush tips.

    Each stroke is a vertex walk: the heading turns by a bounded random
    angle per segment and the walk is clipped to the canvas. Deterministic
    for a fixed (size, config, seed).
    """
    rng = np.random.default_rng(seed)
    canvas = np.zeros((size, size), dtype=bool)
    n_strokes = int(rng.integers(config.min_strokes, config.max_strokes + 1))
    for _ in range(n_strokes):
        n_vertices = int(rng.integers(config.min_vertices, config.max_vertices + 1))
        width = float(rng.uniform(*config.brush_width))
        radius = width / 2.0
        y = float(rng.uniform(0, size - 1))
        x = float(rng.uniform(0, size - 1))
        angle = float(rng.uniform(0, 2 * math.pi))
        _stamp_disk(canvas, y, x, radius)
        for _ in range(n_vertices):
            angle += float(rng.uniform(-config.angle_spread, config.angle_spread))
            length = float(rng.uniform(*config.segment_length))
            ny = float(np.clip(y + length * math.sin(angle), 0, size - 1))
            nx = float(np.clip(x + length * math.cos(angle), 0, size - 1))
            seg_len = math.hypot(ny - y, nx - x)
            steps = max(1, int(math.ceil(seg_len / max(0.5, radius / 2.0))))
            for t in range(1, steps + 1):
                f = t / steps
                _stamp_disk(canvas, y + (ny - y) * f, x + (nx - x) * f, radius)
            y, x = ny, nx
    return HoleMask(canvas.astype(np.uint8))


def mask_hole_ratio(mask: HoleMask) -> float:
    """Fraction of corrupted pixels."""
    return float(mask.values.mean(dtype=np.float64))


def _check_pow2(factor: int) -> None:
    if factor < 1 or (factor & (factor - 1)) != 0:
        raise ValueError(f"resampling factor must be a power of 2, got {factor}")


def downsample(image: RasterImage, factor: int) -> RasterImage:
    """Area-mean downsampling over factor x factor blocks."""
    _check_pow2(factor)
    if factor == 1:
        return image
    h, w, c = image.values.shape
    if h % factor or w % factor:
        raise ShapeError(f"size {h}x{w} not divisible by factor {factor}")
    v = image.values.reshape(h // factor, factor, w // factor, factor, c)
    out = v.mean(axis=(1, 3), dtype=np.float64).astype(np.float32)
    return RasterImage(np.clip(out, -1.0, 1.0))


def upsample(image: RasterImage, factor: int) -> RasterImage:
    """Bilinear upsampling (half-pixel centers, no corner alignment)."""
    _check_pow2(factor)
    if factor == 1:
        return image
    out = _bilinear_up(image.values, factor)
    return RasterImage(np.clip(out, -1.0, 1.0))


def _bilinear_up(values: np.ndarray, factor: int) -> np.ndarray:
    """Bilinear interpolation at output pixel centers (i + 0.5)/f - 0.5,
    clamped at the borders; matches the standard align_corners=False rule."""
    h, w = values.shape[:2]

    def axis_weights(n):
        src = (np.arange(n * factor, dtype=np.float64) + 0.5) / factor - 0.5
        lo = np.floor(src).astype(np.int64)
        frac = src - lo
        hi = np.clip(lo + 1, 0, n - 1)
        lo = np.clip(lo, 0, n - 1)
        return lo, hi, frac

    ylo, yhi, fy = axis_weights(h)
    xlo, xhi, fx = axis_weights(w)
    v = values.astype(np.float64)
    top = v[ylo][:, xlo] * (1 - fx)[None, :, None] + v[ylo][:, xhi] * fx[None, :, None]
    bot = v[yhi][:, xlo] * (1 - fx)[None, :, None] + v[yhi][:, xhi] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    return out.astype(np.float32)


def downsample_mask(mask: HoleMask, factor: int) -> HoleMask:
    """Max-pool mask shrinking: a coarse pixel is corrupted if any covered
    fine pixel is. Shrinking never marks corrupted pixels as known."""
    _check_pow2(factor)
    if factor == 1:
        return mask
    h, w = mask.values.shape
    if h % factor or w % factor:
        raise ShapeError(f"mask size {h}x{w} not divisible by factor {factor}")
    v = mask.values.reshape(h // factor, factor, w // factor, factor)
    return HoleMask(v.max(axis=(1, 3)))


def build_pyramid(image: RasterImage, mask: HoleMask, levels: int) -> PyramidSample:
    """Build the coarsest-first (image, mask) stack by repeated 2x shrinking."""
    if levels < 1:
        raise ConfigError(f"levels must be >= 1, got {levels}")
    if (image.height, image.width) != (mask.height, mask.width):
        raise ShapeError("image and mask sizes differ")
    div = 2 ** (levels - 1)
    if image.height % div or image.width % div:
        raise ConfigError(
            f"size {image.height}x{image.width} not divisible by 2^(levels-1)={div}"
        )
    stack = [(image, mask)]
    for _ in range(levels - 1):
        img, msk = stack[-1]
        stack.append((downsample(img, 2), downsample_mask(msk, 2)))
    stack.reverse()
    return PyramidSample(tuple(stack))
