"""Coordinate grids, Fourier positional features and decoder input vectors.

A decoder query is the 6-vector ``(x, y, r, g, b, m)``: the pixel-centre
coordinate normalised to (0, 1), the composite colour and the mask value.
"""

import math
from dataclasses import dataclass

import numpy as np

from .imaging import check_image, check_mask


@dataclass(frozen=True)
class CoordGrid:
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("grid dimensions must be >= 1")

    @property
    def size(self):
        return self.height * self.width

    @property
    def coords(self):
        """(H*W, 2) array of (x, y), row-major."""
        return grid_coords(self.height, self.width, np.arange(self.size))


def make_grid(h, w):
    return CoordGrid(int(h), int(w))


def grid_coords(h, w, flat_index):
    """Pixel-centre (x, y) for flat row-major indices into an (h, w) grid."""
    flat_index = np.asarray(flat_index, dtype=np.int64)
    rows, cols = np.divmod(flat_index, w)
    out = np.empty((flat_index.size, 2))
    out[:, 0] = (cols + 0.5) / w
    out[:, 1] = (rows + 0.5) / h
    return out


def subsample_grid(grid, factor):
    """Grid of the image downsampled by ``factor`` (ceil convention), with its own pixel centres."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    return CoordGrid(-(-grid.height // factor), -(-grid.width // factor))


@dataclass(frozen=True)
class EmbeddingConfig:
    num_frequencies: int = 8
    base_frequency: float = 1.0
    embed_rgb_mask: bool = False

    def __post_init__(self):
        if self.num_frequencies < 0:
            raise ValueError("num_frequencies must be >= 0")
        if not self.base_frequency > 0:
            raise ValueError("base_frequency must be > 0")

    @property
    def dim(self):
        """Width of an embedded query vector."""
        extra = 8 * self.num_frequencies if self.embed_rgb_mask else 0
        return 4 * self.num_frequencies + 4 + extra

    def to_dict(self):
        return {
            "num_frequencies": self.num_frequencies,
            "base_frequency": self.base_frequency,
            "embed_rgb_mask": self.embed_rgb_mask,
        }


def _sincos(values, cfg):
    """[sin, cos] features per frequency for each column of ``values`` (n, k)."""
    n, k = values.shape
    F = cfg.num_frequencies
    out = np.empty((n, F, k, 2))
    for f in range(F):
        phase = (2.0 * math.pi * cfg.base_frequency * 2.0 ** f) * values
        out[:, f, :, 0] = np.sin(phase)
        out[:, f, :, 1] = np.cos(phase)
    return out.reshape(n, F * k * 2)


def fourier_embed(x, y, cfg):
    """Fourier features of a coordinate: per frequency [sin x, cos x, sin y, cos y]."""
    xy = np.array([[x, y]], dtype=np.float64)
    return _sincos(xy, cfg)[0]


def embed_vectors(vectors, cfg, out=None):
    """Embed raw (n, 6) query vectors into (n, cfg.dim) decoder inputs.

    Layout: Fourier features of (x, y), then raw r, g, b, m, then (only when
    ``embed_rgb_mask``) Fourier features of r, g, b, m.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    n = vectors.shape[0]
    F = cfg.num_frequencies
    if out is None:
        out = np.empty((n, cfg.dim))
    out[:, :4 * F] = _sincos(vectors[:, :2], cfg)
    out[:, 4 * F:4 * F + 4] = vectors[:, 2:6]
    if cfg.embed_rgb_mask:
        out[:, 4 * F + 4:] = _sincos(vectors[:, 2:6], cfg)
    return out


def assemble_vectors(img, mask, grid):
    """Row-major batch of (x, y, r, g, b, m) query vectors, one per pixel."""
    img = check_image(img)
    mask = check_mask(mask, img.shape)
    if (grid.height, grid.width) != img.shape[:2]:
        raise ValueError("grid does not match the image dimensions")
    out = np.empty((grid.size, 6))
    out[:, :2] = grid.coords
    out[:, 2:5] = img.reshape(-1, 3)
    out[:, 5] = mask.reshape(-1)
    return out


def disassemble_vectors(vectors, h, w):
    """Inverse of :func:`assemble_vectors`: scatter the RGB and mask back into planes."""
    vectors = np.asarray(vectors)
    return vectors[:, 2:5].reshape(h, w, 3).copy(), vectors[:, 5].reshape(h, w).copy()
