"""Builders shared by the decoder, pipeline and acceptance tests."""

import numpy as np

from hinet.coords import EmbeddingConfig
from hinet.decoder import DecoderParams, GridLayer, LocalMLPGrid, LripBlock

import oracles


def random_grid(rng, gh, gw, dims, rank=2, scale=0.5):
    cells = gh * gw
    layers = []
    for i, o in zip(dims[:-1], dims[1:]):
        layers.append(GridLayer(
            base=rng.normal(0.0, scale, (o, i)),
            mod_a=rng.normal(1.0, 0.3, (cells, o, rank)),
            mod_b=rng.normal(0.5, 0.3, (cells, rank, i)),
            bias=rng.normal(0.0, 0.2, (cells, o)),
        ))
    return LocalMLPGrid(gh, gw, layers)


def constant_grid(values, gh, gw, in_dim, out_dim=1):
    """Grid whose cell c outputs ``values[c]`` in every channel, ignoring its input."""
    cells = gh * gw
    layer = GridLayer(base=np.zeros((out_dim, in_dim)), mod_a=np.zeros((cells, out_dim, 1)),
                      mod_b=np.zeros((cells, 1, in_dim)),
                      bias=np.repeat(np.asarray(values, dtype=float)[:, None], out_dim, axis=1))
    return LocalMLPGrid(gh, gw, [layer])


def linear_grid(weight, cells=1):
    """Grid applying the dense ``weight`` (out, in) with zero bias in every cell."""
    o, i = weight.shape
    layer = GridLayer(base=np.asarray(weight, dtype=float), mod_a=np.ones((cells, o, 1)),
                      mod_b=np.ones((cells, 1, i)), bias=np.zeros((cells, o)))
    return LocalMLPGrid(1, cells, [layer])


def random_decoder(rng, grids=((1, 1), (2, 2), (2, 3)), depths=(1, 1, 0), scales=(4, 2, 1), width=5,
                   frequencies=2, rank=2):
    emb = EmbeddingConfig(num_frequencies=frequencies)
    blocks = []
    for k, ((gh, gw), d, s) in enumerate(zip(grids, depths, scales)):
        d_in = emb.dim + (width if k else 0)
        blocks.append(LripBlock(random_grid(rng, gh, gw, [d_in] + [width] * (d + 1), rank), s, d))
    app = random_grid(rng, 1, 1, [width, width, 3], rank)
    return DecoderParams(blocks, app, emb)


def decoder_oracle(params, img, mask):
    """Materialise every scale's features with explicit loops and resize them up."""
    H, W = img.shape[:2]
    F = params.embedding.num_frequencies
    prev = None
    cache = {}

    def cell(g, c):
        if (id(g), c) not in cache:
            cache[id(g), c] = ([oracles.fmm_loop(l.base, l.mod_a[c], l.mod_b[c]) for l in g.layers],
                               [l.bias[c] for l in g.layers])
        return cache[id(g), c]

    for blk in params.blocks:
        s = blk.scale_factor
        h, w = H // s, W // s
        rgb, m = oracles.resize_loop(img, h, w), oracles.resize_loop(mask, h, w)
        up = oracles.resize_loop(prev, h, w) if prev is not None else None
        g = blk.grid
        feats = np.zeros((h, w, g.out_dim))
        for i in range(h):
            for j in range(w):
                x, y = (j + 0.5) / w, (i + 0.5) / h
                inp = oracles.fourier_loop(x, y, F) + list(rgb[i, j]) + [m[i, j]]
                if up is not None:
                    inp += list(up[i, j])
                c = min(int(y * g.grid_h), g.grid_h - 1) * g.grid_w + min(int(x * g.grid_w), g.grid_w - 1)
                feats[i, j] = oracles.mlp_loop(*cell(g, c), inp)
        prev = feats
    ws, bs = cell(params.app, 0)
    return np.array([oracles.mlp_loop(ws, bs, f) for f in prev.reshape(-1, prev.shape[-1])])
