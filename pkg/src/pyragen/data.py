"""Image sources for training and evaluation.

Two kinds of source exist: folders of real images and a procedural texture
corpus. Both can materialize their images at any pyramid-compatible
resolution, which the resolution sweep relies on, and both draw training
samples in a seeded order.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .imaging import RasterImage, load_image

__all__ = ["ArrayDataset", "ImageFolderDataset", "TextureCorpus"]

_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class ArrayDataset:
    """In-memory dataset of equally sized images with seeded sampling."""

    def __init__(self, images):
        images = list(images)
        if not images:
            raise ConfigError("dataset is empty")
        self.images = images

    def __len__(self):
        return len(self.images)

    def __getitem__(self, idx) -> RasterImage:
        return self.images[idx]

    def sample(self, rng: np.random.Generator) -> RasterImage:
        """Random image with random horizontal flip."""
        img = self.images[int(rng.integers(len(self.images)))]
        if int(rng.integers(2)):
            img = RasterImage(np.ascontiguousarray(img.values[:, ::-1]))
        return img


class ImageFolderDataset:
    """All decodable images under a directory, loaded at a fixed size."""

    def __init__(self, root, size: int):
        root = Path(root)
        if not root.is_dir():
            raise ConfigError(f"dataset directory does not exist: {root}")
        self.files = sorted(
            p for p in root.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES
        )
        if not self.files:
            raise ConfigError(f"no images found under {root}")
        self.size = size
        self._cache = {}

    def __len__(self):
        return len(self.files)

    def __getitem__(self, idx) -> RasterImage:
        if idx not in self._cache:
            self._cache[idx] = load_image(self.files[idx], self.size)
        return self._cache[idx]

    def sample(self, rng: np.random.Generator) -> RasterImage:
        img = self[int(rng.integers(len(self)))]
        if int(rng.integers(2)):
            img = RasterImage(np.ascontiguousarray(img.values[:, ::-1]))
        return img

    def at_resolution(self, size: int):
        return [load_image(f, size) for f in self.files]


class TextureCorpus:
    """Procedural texture images defined on normalized coordinates.

    Each index maps to a fixed parameter draw (stripes, checkers, blob
    fields or smooth gradients plus a low-frequency base), so the same
    texture can be rendered at any resolution. Useful as a deterministic
    synthetic corpus for desk-scale training and sweeps.
    """

    def __init__(self, count: int, seed: int = 0):
        if count < 1:
            raise ConfigError("corpus needs at least one texture")
        self.count = count
        self.seed = seed

    def __len__(self):
        return self.count

    def _params(self, index: int):
        rng = np.random.default_rng([self.seed, index])
        family = ["stripes", "checker", "blobs", "gradient"][int(rng.integers(4))]
        p = {
            "family": family,
            "base": rng.uniform(-0.55, 0.55, size=3),
            "amp": rng.uniform(0.25, 0.45, size=3) * rng.choice([-1.0, 1.0], size=3),
        }
        if family in ("stripes", "checker"):
            theta = rng.uniform(0, math.pi)
            cycles = rng.uniform(0.75, 5.0)
            p["k1"] = (cycles * math.cos(theta), cycles * math.sin(theta))
            p["phase1"] = rng.uniform(0, 2 * math.pi)
            p["sharp"] = rng.uniform(1.0, 6.0)
            if family == "checker":
                cycles2 = rng.uniform(0.75, 5.0)
                p["k2"] = (-cycles2 * math.sin(theta), cycles2 * math.cos(theta))
                p["phase2"] = rng.uniform(0, 2 * math.pi)
        elif family == "blobs":
            m = int(rng.integers(3, 9))
            p["centers"] = rng.uniform(0, 1, size=(m, 2))
            p["sigmas"] = rng.uniform(0.08, 0.3, size=m)
            p["heights"] = rng.uniform(-1.0, 1.0, size=m)
        else:
            p["slope"] = rng.uniform(-1.0, 1.0, size=2)
        return p

    def render(self, index: int, size: int) -> RasterImage:
        p = self._params(index)
        coords = (np.arange(size, dtype=np.float64) + 0.5) / size
        yy, xx = np.meshgrid(coords, coords, indexing="ij")
        if p["family"] == "stripes":
            kx, ky = p["k1"]
            field = np.sin(2 * math.pi * (kx * xx + ky * yy) + p["phase1"])
            field = np.tanh(p["sharp"] * field) / math.tanh(p["sharp"])
        elif p["family"] == "checker":
            kx, ky = p["k1"]
            ux, uy = p["k2"]
            a = np.sin(2 * math.pi * (kx * xx + ky * yy) + p["phase1"])
            b = np.sin(2 * math.pi * (ux * xx + uy * yy) + p["phase2"])
            field = np.tanh(p["sharp"] * a * b) / math.tanh(p["sharp"])
        elif p["family"] == "blobs":
            field = np.zeros_like(xx)
            for (cy, cx), sig, h in zip(p["centers"], p["sigmas"], p["heights"]):
                d2 = (xx - cx) ** 2 + (yy - cy) ** 2
                field += h * np.exp(-d2 / (2 * sig * sig))
        else:
            sx, sy = p["slope"]
            field = sx * (2 * xx - 1) + sy * (2 * yy - 1)
        img = p["base"][None, None, :] + p["amp"][None, None, :] * field[:, :, None]
        return RasterImage(np.clip(img, -1.0, 1.0).astype(np.float32))

    def at_resolution(self, size: int):
        return [self.render(i, size) for i in range(self.count)]

    def as_dataset(self, size: int) -> ArrayDataset:
        return ArrayDataset(self.at_resolution(size))
