"""Synthetic datasets in token layout (N, T, d).

2-D sets use T=2 tokens of one coordinate each. ``tiny_digits`` renders
procedural 8x8 glyphs and cuts them into square patches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng

DATASETS = ("two_moons", "checkerboard", "gauss_grid", "tiny_digits")


@dataclass
class Dataset:
    name: str
    samples: np.ndarray           # (N, T, d)
    labels: np.ndarray            # (N,) in [0, num_classes)
    num_classes: int
    bbox: tuple[np.ndarray, np.ndarray]   # per-coordinate (low, high), flattened layout
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.samples) == 0:
            raise ValueError("dataset is empty")
        if self.labels.shape != (len(self.samples),):
            raise ValueError("one label per sample required")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("label out of range")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def tokens(self) -> int:
        return self.samples.shape[1]

    @property
    def token_dim(self) -> int:
        return self.samples.shape[2]

    def flat(self) -> np.ndarray:
        return self.samples.reshape(len(self), -1)

    def inside_bbox(self, x: np.ndarray) -> np.ndarray:
        """Boolean per sample: every coordinate within the declared box."""
        f = np.asarray(x).reshape(len(x), -1)
        lo, hi = self.bbox
        return np.all((f >= lo) & (f <= hi), axis=1)

    def subset(self, idx) -> Dataset:
        return Dataset(self.name, self.samples[idx], self.labels[idx], self.num_classes,
                       self.bbox, dict(self.meta))


def _points(name, xy, labels, classes, lo, hi, **meta) -> Dataset:
    xy = np.asarray(xy, dtype=np.float32)
    return Dataset(name, xy.reshape(len(xy), 2, 1), labels.astype(np.int64), classes,
                   (np.asarray(lo, np.float32), np.asarray(hi, np.float32)), meta)


MOON_NOISE = 0.1
MOON_NOISE_CLIP = 0.3


def two_moons(n: int, rng: Rng) -> Dataset:
    labels = rng.integers(0, 2, (n,))
    theta = np.pi * rng.uniform(0.0, 1.0, (n,), dtype=np.float64)
    upper = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    lower = np.stack([1.0 - np.cos(theta), 0.5 - np.sin(theta)], axis=1)
    xy = np.where(labels[:, None] == 0, upper, lower)
    noise = np.clip(MOON_NOISE * rng.normal((n, 2), dtype=np.float64),
                    -MOON_NOISE_CLIP, MOON_NOISE_CLIP)
    xy = xy + noise - np.array([0.5, 0.25])
    m = MOON_NOISE_CLIP
    return _points("two_moons", xy, labels, 2, [-1.5 - m, -0.75 - m], [1.5 + m, 0.75 + m])


def checkerboard(n: int, rng: Rng, squares: int = 4, size: float = 1.0) -> Dataset:
    """Uniform points on the dark squares of a board centred at the origin.

    Label = column parity, so each class is its own sub-checkerboard.
    """
    dark = [(i, j) for i in range(squares) for j in range(squares) if (i + j) % 2 == 0]
    pick = rng.integers(0, len(dark), (n,))
    cells = np.array(dark)[pick]
    u = rng.uniform(0.0, 1.0, (n, 2), dtype=np.float64)
    half = squares * size / 2
    xy = (cells + u) * size - half
    return _points("checkerboard", xy, cells[:, 0] % 2, 2, [-half, -half], [half, half])


GRID_SPACING = 2.0
GRID_STD = 0.2


def gauss_grid_centers(spacing: float = GRID_SPACING) -> np.ndarray:
    g = (np.arange(3) - 1) * spacing
    return np.array([(a, b) for a in g for b in g])


def gauss_grid(n: int, rng: Rng, std: float = GRID_STD, spacing: float = GRID_SPACING) -> Dataset:
    """3x3 isotropic Gaussian mixture, one class per component, balanced counts."""
    centers = gauss_grid_centers(spacing)
    labels = np.arange(n) % 9
    labels = labels[rng.permutation(n)]
    xy = centers[labels] + std * rng.normal((n, 2), dtype=np.float64)
    reach = spacing + 6 * std
    return _points("gauss_grid", xy, labels, 9, [-reach, -reach], [reach, reach],
                   std=std, spacing=spacing, centers=centers)


# 5x7 bitmaps, one string per row
_GLYPHS = {
    0: ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    1: ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    2: ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    3: ["11110", "00001", "00001", "01110", "00001", "00001", "11110"],
    4: ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    5: ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    6: ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    7: ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    8: ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    9: ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
}


def glyph(digit: int) -> np.ndarray:
    return np.array([[c == "1" for c in row] for row in _GLYPHS[digit]], dtype=np.float64)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(N, H, W) -> (N, (H/p)*(W/p), p*p), raster order over patches."""
    n, h, w = images.shape
    if h % patch or w % patch:
        raise ValueError(f"patch {patch} does not tile {h}x{w}")
    x = images.reshape(n, h // patch, patch, w // patch, patch).transpose(0, 1, 3, 2, 4)
    return x.reshape(n, (h // patch) * (w // patch), patch * patch)


def unpatchify(tokens: np.ndarray, size: int = 8) -> np.ndarray:
    n, t, d = tokens.shape
    p = int(round(np.sqrt(d)))
    g = size // p
    if p * p != d or g * g != t:
        raise ValueError(f"tokens {tokens.shape} do not form a {size}x{size} image")
    return tokens.reshape(n, g, g, p, p).transpose(0, 1, 3, 2, 4).reshape(n, size, size)


def tiny_digits(n: int, rng: Rng, patch: int = 2) -> Dataset:
    """8x8 glyphs in [-1, 1]: random one-pixel shifts, stroke intensity and jitter."""
    labels = rng.integers(0, 10, (n,))
    shift = rng.integers(0, 2, (n, 2))
    ink = rng.uniform(0.6, 1.0, (n,), dtype=np.float64)
    images = np.zeros((n, 8, 8))
    for i in range(n):
        r, c = shift[i]
        images[i, r:r + 7, c + 1:c + 6] = glyph(int(labels[i])) * ink[i]
    images = np.clip(images + 0.05 * rng.normal((n, 8, 8), dtype=np.float64), 0.0, 1.0)
    images = 2.0 * images - 1.0
    tokens = patchify(images, patch).astype(np.float32)
    d = tokens.shape[1] * tokens.shape[2]
    return Dataset("tiny_digits", tokens, labels.astype(np.int64), 10,
                   (np.full(d, -1.0, np.float32), np.full(d, 1.0, np.float32)), {"patch": patch})


def make_dataset(name: str, n: int, rng: Rng, **kwargs) -> Dataset:
    if n <= 0:
        raise ValueError("n must be positive")
    builders = {"two_moons": two_moons, "checkerboard": checkerboard,
                "gauss_grid": gauss_grid, "tiny_digits": tiny_digits}
    if name not in builders:
        raise ValueError(f"unknown dataset {name!r}; choose from {', '.join(DATASETS)}")
    return builders[name](n, rng, **kwargs)
