"""Implicit decoder: FMM-parameterised MLPs, local MLP grids and the LRIP stack.

Content features come from a stack of LRIP blocks.  Each block is a grid of
small MLPs, and every query is routed to the MLP of the cell that contains its
coordinate.  Blocks run from coarse to fine resolution.  Every block after the
first also sees the previous block's features, bilinearly upsampled to its own
resolution.  A single global MLP turns the finest features into RGB.

Queries are described by a :class:`QueryPyramid`, which lists the pixels each
level must evaluate.  Any subset of output pixels (a tile, a foreground region,
a training crop) yields exactly the values the full-image pass computes for
those pixels.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import kernels, probe
from .coords import EmbeddingConfig, embed_vectors, grid_coords
from .imaging import sample_resized

LEAKY_SLOPE = 0.2
HIDDEN_WIDTH = 32


# ------------------------------------------------------------- single MLPs

@dataclass
class MlpLayerParams:
    """One FMM layer: effective weight ``base * (mod_a @ mod_b)``."""

    base: np.ndarray   # (out, in), shared
    mod_a: np.ndarray  # (out, r)
    mod_b: np.ndarray  # (r, in)
    bias: np.ndarray   # (out,)

    @property
    def in_dim(self):
        return self.base.shape[1]

    @property
    def out_dim(self):
        return self.base.shape[0]

    @property
    def rank(self):
        return self.mod_a.shape[1]


def fmm_materialize(layer):
    out_dim, in_dim = layer.base.shape
    if layer.mod_a.shape[0] != out_dim or layer.mod_b.shape[1] != in_dim \
            or layer.mod_a.shape[1] != layer.mod_b.shape[0]:
        raise ValueError(
            f"FMM shapes do not chain: base {layer.base.shape}, "
            f"mod_a {layer.mod_a.shape}, mod_b {layer.mod_b.shape}")
    return layer.base * (layer.mod_a @ layer.mod_b)


def fmm_param_count(in_dim, out_dim, rank):
    """(shared base count, per-instance predicted count) for one FMM layer."""
    return out_dim * in_dim, rank * (out_dim + in_dim) + out_dim


@dataclass
class MlpParams:
    """A dense MLP; leaky rectifier on hidden layers, linear output layer."""

    weights: list
    biases: list
    slope: float = LEAKY_SLOPE

    def __post_init__(self):
        for k in range(len(self.weights) - 1):
            if self.weights[k].shape[0] != self.weights[k + 1].shape[1]:
                raise ValueError(f"layer {k} output does not feed layer {k + 1}")

    @property
    def in_dim(self):
        return self.weights[0].shape[1]

    @classmethod
    def from_fmm(cls, layers, slope=LEAKY_SLOPE):
        return cls([fmm_materialize(l) for l in layers], [np.asarray(l.bias) for l in layers], slope)


def mlp_forward(p, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.in_dim:
        raise ValueError(f"input width {x.shape[-1]} != MLP input {p.in_dim}")
    h = x
    last = len(p.weights) - 1
    for k, (w, b) in enumerate(zip(p.weights, p.biases)):
        h = h @ w.T + b
        if k < last:
            h = np.where(h > 0.0, h, h * p.slope)
    return h


# --------------------------------------------------------- local MLP grids

@dataclass
class GridLayer:
    """FMM layer replicated over the cells of a grid (cells flattened row-major)."""

    base: np.ndarray   # (out, in)
    mod_a: np.ndarray  # (cells, out, r)
    mod_b: np.ndarray  # (cells, r, in)
    bias: np.ndarray   # (cells, out)

    def materialize(self):
        return self.base[None] * np.matmul(self.mod_a, self.mod_b)


@dataclass
class LocalMLPGrid:
    grid_h: int
    grid_w: int
    layers: list
    slope: float = LEAKY_SLOPE

    def __post_init__(self):
        if self.grid_h < 1 or self.grid_w < 1:
            raise ValueError("grid dimensions must be >= 1")
        cells = self.grid_h * self.grid_w
        for k, layer in enumerate(self.layers):
            if layer.mod_a.shape[0] != cells or layer.bias.shape[0] != cells:
                raise ValueError(f"layer {k} does not carry {cells} cells")
            if k and layer.base.shape[1] != self.layers[k - 1].base.shape[0]:
                raise ValueError(f"layer {k - 1} output does not feed layer {k}")

    @property
    def cells(self):
        return self.grid_h * self.grid_w

    @property
    def in_dim(self):
        return self.layers[0].base.shape[1]

    @property
    def out_dim(self):
        return self.layers[-1].base.shape[0]

    def cell_params(self, i, j):
        c = i * self.grid_w + j
        return MlpParams.from_fmm(
            [MlpLayerParams(l.base, l.mod_a[c], l.mod_b[c], l.bias[c]) for l in self.layers],
            self.slope)

    def dense(self):
        """Materialised per-cell weights: list of ((cells, out, in), (cells, out))."""
        return [(l.materialize(), np.asarray(l.bias, dtype=np.float64)) for l in self.layers]


def cell_index(x, y, grid_h, grid_w):
    """Cell (row, col) holding a coordinate; cells are half-open, the last one closed."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any((x < 0) | (x > 1) | (y < 0) | (y > 1)):
        raise ValueError("coordinates must lie in [0, 1]")
    i = np.minimum(np.floor(y * grid_h).astype(np.int64), grid_h - 1)
    j = np.minimum(np.floor(x * grid_w).astype(np.int64), grid_w - 1)
    return i, j


def _snap(g, tol=1e-12):
    # (j + 0.5) / n * n - 0.5 can land an ulp away from j
    r = round(g)
    return float(r) if abs(g - r) <= tol else g


def interp_weights(x, y, grid_h, grid_w):
    """Four surrounding cells and their bilinear blend weights for one query.

    Cell centres sit at ((j + 0.5) / grid_w, (i + 0.5) / grid_h).  The weight
    of a corner is the area of the rectangle spanned by the query and the
    opposite corner, divided by the total.  Queries outside the span of the
    centres are clamped onto it.
    """
    gy = _snap(min(max(y * grid_h - 0.5, 0.0), grid_h - 1.0))
    gx = _snap(min(max(x * grid_w - 0.5, 0.0), grid_w - 1.0))
    i0 = min(int(np.floor(gy)), max(grid_h - 2, 0))
    j0 = min(int(np.floor(gx)), max(grid_w - 2, 0))
    i1 = min(i0 + 1, grid_h - 1)
    j1 = min(j0 + 1, grid_w - 1)
    fy = gy - i0
    fx = gx - j0
    cells = np.array([i0 * grid_w + j0, i0 * grid_w + j1, i1 * grid_w + j0, i1 * grid_w + j1])
    weights = np.array([(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx])
    return cells, weights


def interp_mlp(grid, x, y):
    """Bilinearly blended MLP at (x, y): weights and biases mixed parameter-wise.

    This is the continuous-but-expensive alternative to LRIP; it is kept as
    a reference for boundary-continuity checks and is not used for decoding.
    """
    cells, wts = interp_weights(x, y, grid.grid_h, grid.grid_w)
    weights, biases = [], []
    for layer in grid.layers:
        dense_w = [fmm_materialize(MlpLayerParams(layer.base, layer.mod_a[c], layer.mod_b[c], layer.bias[c]))
                   for c in cells]
        w = sum(wt * dw for wt, dw in zip(wts, dense_w))
        b = sum(wt * layer.bias[c] for wt, c in zip(wts, cells))
        weights.append(w)
        biases.append(b)
    return MlpParams(weights, biases, grid.slope)


def routed_forward(dense, x, cells, slope=LEAKY_SLOPE, tag="decoder"):
    """Run each row of ``x`` through the MLP of its cell; returns a tracked buffer."""
    h = x
    last = len(dense) - 1
    for k, (w, b) in enumerate(dense):
        out = probe.empty((x.shape[0], w.shape[1]), f"{tag}/hidden")
        kernels.routed_affine(h, cells, w, b, k < last, slope, out)
        if h is not x:
            probe.release(h)
        h = out
    return h


def local_forward_nearest(grid, inputs, xy):
    """Nearest-cell routing: each input row is processed by its cell's MLP."""
    inputs = np.ascontiguousarray(inputs, dtype=np.float64)
    if inputs.shape[1] != grid.in_dim:
        raise ValueError(f"input width {inputs.shape[1]} != grid input {grid.in_dim}")
    i, j = cell_index(xy[:, 0], xy[:, 1], grid.grid_h, grid.grid_w)
    return routed_forward(grid.dense(), inputs, i * grid.grid_w + j, grid.slope)


# --------------------------------------------------------------- decoder

@dataclass
class LripBlock:
    grid: LocalMLPGrid
    scale_factor: int
    hidden_depth: int

    def __post_init__(self):
        s = self.scale_factor
        if s < 1 or s & (s - 1):
            raise ValueError("scale_factor must be a power of two")
        if len(self.grid.layers) != self.hidden_depth + 1:
            raise ValueError(f"{len(self.grid.layers)} layers do not match hidden depth {self.hidden_depth}")


@dataclass
class DecoderParams:
    blocks: list
    app: LocalMLPGrid
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    lut: object = None

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("decoder needs at least one LRIP block")
        if self.app.cells != 1:
            raise ValueError("the appearance MLP must be a single global MLP")
        if self.app.out_dim != 3:
            raise ValueError("the appearance MLP must output RGB")
        emb = self.embedding.dim
        for k, block in enumerate(self.blocks):
            prior = self.blocks[k - 1].grid.out_dim if k else 0
            if block.grid.in_dim != emb + prior:
                raise ValueError(f"block {k} expects {block.grid.in_dim} inputs, not {emb + prior}")
        if self.app.in_dim != self.blocks[-1].grid.out_dim:
            raise ValueError("appearance MLP input does not match the block features")

    @property
    def scales(self):
        return [b.scale_factor for b in self.blocks]

    @cached_property
    def dense(self):
        """Materialised weights of every block and of the appearance MLP (computed once)."""
        blocks = [b.grid.dense() for b in self.blocks]
        app = self.app.dense()
        for lst in blocks + [app]:
            for w, b in lst:
                probe.track(w, "model")
                probe.track(b, "model")
        return blocks, app


# ----------------------------------------------------------- query pyramid

@dataclass
class Level:
    """Queries of one LRIP block.

    ``index`` holds sorted flat pixel indices into this level's
    ``height x width`` grid.  Row p of the previous level's features is
    upsampled into query q by ``sum_k up_weight[q, k] * prev[up_index[q, k]]``.
    """

    height: int
    width: int
    index: np.ndarray
    vectors: np.ndarray
    up_index: np.ndarray = None
    up_weight: np.ndarray = None

    @property
    def size(self):
        return self.index.size


@dataclass
class QueryPyramid:
    height: int
    width: int
    levels: list

    @property
    def output_index(self):
        return self.levels[-1].index


def pyramid_mode(height, width, scales):
    """'pyramid' when every scale divides the image, else 'same' (all blocks at full size)."""
    top = max(scales)
    return "pyramid" if height % top == 0 and width % top == 0 else "same"


def _upsample_taps(n_src, n_dst, pos):
    src = (pos + 0.5) * (n_src / n_dst) - 0.5
    src = np.clip(src, 0.0, n_src - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_src - 1)
    frac = src - lo
    # zero-weight taps point at the low tap so they add no dependencies
    hi = np.where(frac > 0.0, hi, lo)
    return lo, hi, frac


def build_pyramid(img, mask, scales, index=None, size=None, mode="auto", tag="pyramid"):
    """Build the per-block query levels for a set of output pixels.

    ``img``/``mask`` are the source planes; level ``s`` samples
    ``resize_bilinear(source, H/s, W/s)`` where ``(H, W)`` is ``size`` (the
    output resolution, default: the source size).  ``index`` selects output
    pixels (flat, row-major, default all).  Coarser levels contain exactly the
    pixels that the bilinear upsampling of the next level touches.
    """
    img = np.asarray(img, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    H, W = size if size is not None else img.shape[:2]
    if mode == "auto":
        mode = pyramid_mode(H, W, scales)
    if mode == "pyramid" and (H % max(scales) or W % max(scales)):
        raise ValueError(f"{H}x{W} is not divisible by the LRIP scale factors {scales}")
    if index is None:
        index = np.arange(H * W, dtype=np.int64)
    index = np.unique(np.asarray(index, dtype=np.int64))
    if index.size == 0:
        raise ValueError("empty query set")
    if index[0] < 0 or index[-1] >= H * W:
        raise ValueError("query index out of range")

    dims = [((H // s, W // s) if mode == "pyramid" else (H, W)) for s in scales]
    levels = [None] * len(scales)
    need = index
    for b in range(len(scales) - 1, -1, -1):
        h, w = dims[b]
        rows, cols = np.divmod(need, w)
        vec = probe.empty((need.size, 6), tag)
        vec[:, :2] = grid_coords(h, w, need)
        vec[:, 2:5] = sample_resized(img, h, w, rows, cols)
        vec[:, 5] = sample_resized(mask, h, w, rows, cols)
        level = Level(h, w, probe.track(need, tag), vec)
        levels[b] = level
        if b == 0:
            break
        ph, pw = dims[b - 1]
        y0, y1, fy = _upsample_taps(ph, h, rows.astype(np.float64))
        x0, x1, fx = _upsample_taps(pw, w, cols.astype(np.float64))
        taps = np.stack([y0 * pw + x0, y0 * pw + x1, y1 * pw + x0, y1 * pw + x1], axis=1)
        prev_need = np.unique(taps)
        level.up_index = probe.track(np.searchsorted(prev_need, taps), tag)
        level.up_weight = probe.track(np.stack(
            [(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx], axis=1), tag)
        need = prev_need
    return QueryPyramid(H, W, levels)


def release_pyramid(pyramid):
    for level in pyramid.levels:
        probe.release(level.vectors, level.index, level.up_index, level.up_weight)


def lrip_forward(blocks, pyramid, embedding, dense=None):
    """Content features (n, width) at the finest level's queries.

    ``dense`` optionally supplies pre-materialised block weights.
    """
    if len(pyramid.levels) != len(blocks):
        raise ValueError("pyramid has a different number of levels than blocks")
    if dense is None:
        dense = [b.grid.dense() for b in blocks]
    prev = None
    for block, weights, level in zip(blocks, dense, pyramid.levels):
        grid = block.grid
        n = level.size
        width = grid.in_dim
        x = probe.empty((n, width), "decoder/input")
        emb = embedding.dim
        embed_vectors(level.vectors, embedding, out=x[:, :emb])
        if prev is not None:
            if level.up_index is None:
                raise ValueError("level is missing its upsampling taps")
            kernels.gather_blend(prev, level.up_index, level.up_weight, x[:, emb:])
            probe.release(prev)
        i, j = cell_index(level.vectors[:, 0], level.vectors[:, 1], grid.grid_h, grid.grid_w)
        prev = routed_forward(weights, x, i * grid.grid_w + j, grid.slope)
        probe.release(x)
    return prev


def decoder_forward(params, pyramid):
    """RGB (n, 3) at the finest level's queries; unclamped."""
    blocks, app = params.dense
    feats = lrip_forward(params.blocks, pyramid, params.embedding, blocks)
    cells = np.zeros(feats.shape[0], dtype=np.int64)
    rgb = routed_forward(app, feats, cells, params.app.slope)
    probe.release(feats)
    return rgb
