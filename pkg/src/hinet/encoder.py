"""Convolutional hypernetwork that predicts the decoder's parameters.

A 4-stage stride-2 conv net reads the composite and its mask resized to
``input_size``.  The first three stage maps are average-pooled onto the LRIP
block grids, and a per-cell linear head emits every FMM modulation factor and
bias of that block.  The last stage is averaged globally and drives the
appearance MLP head and the optional 3D LUT head (predicted as a residual over
the identity lattice).  FMM base tensors are model-level trainables shared by
all images.

The graph is written once with :mod:`hinet.autodiff` ops; inference runs it
with gradients disabled.
"""

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .coords import EmbeddingConfig
from .decoder import (
    LEAKY_SLOPE, DecoderParams, GridLayer, LocalMLPGrid, LripBlock, fmm_param_count,
)
from .imaging import resize_bilinear, check_image, check_mask
from .lut import Lut3D, identity_lattice


@dataclass
class EncoderConfig:
    input_size: int = 256
    stage_channels: tuple = (16, 32, 64, 128)
    grid_sizes: tuple = ((16, 16), (16, 16), (16, 16))
    fmm_rank: int = 4
    lut_head: bool = True
    lut_dim: int = 7

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.grid_sizes = tuple(tuple(int(v) for v in g) for g in self.grid_sizes)
        if len(self.stage_channels) != 4:
            raise ValueError("the encoder has exactly 4 stages")
        if self.input_size % 16:
            raise ValueError("input_size must be divisible by 16")
        if self.fmm_rank < 1:
            raise ValueError("fmm_rank must be >= 1")
        for k, (gh, gw) in enumerate(self.grid_sizes):
            side = self.stage_size(k)
            if not (1 <= gh <= side and 1 <= gw <= side):
                raise ValueError(f"grid {gh}x{gw} does not fit stage {k + 1} ({side}x{side})")

    def stage_size(self, k):
        return self.input_size // 2 ** (k + 1)


@dataclass
class DecoderConfig:
    hidden_width: int = 32
    block_depths: tuple = (3, 2, 1)
    block_scales: tuple = (4, 2, 1)
    app_depth: int = 2
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)

    def __post_init__(self):
        self.block_depths = tuple(int(d) for d in self.block_depths)
        self.block_scales = tuple(int(s) for s in self.block_scales)
        if isinstance(self.embedding, dict):
            self.embedding = EmbeddingConfig(**self.embedding)
        if len(self.block_depths) != len(self.block_scales):
            raise ValueError("block_depths and block_scales differ in length")
        for s in self.block_scales:
            if s < 1 or s & (s - 1):
                raise ValueError("LRIP scale factors must be powers of two")

    def block_shapes(self, k):
        """(in, out) of each layer of block k: ``depth`` hidden layers plus an output layer."""
        width = self.hidden_width
        d_in = self.embedding.dim + (width if k else 0)
        dims = [d_in] + [width] * (self.block_depths[k] + 1)
        return list(zip(dims[:-1], dims[1:]))

    def app_shapes(self):
        dims = [self.hidden_width] * (self.app_depth + 1) + [3]
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.decoder, dict):
            self.decoder = DecoderConfig(**self.decoder)
        if len(self.decoder.block_depths) != len(self.encoder.grid_sizes):
            raise ValueError("one grid size is needed per LRIP block")
        if len(self.decoder.block_depths) > 3:
            raise ValueError("at most three LRIP blocks (one per shallow encoder stage)")

    def to_dict(self):
        d = asdict(self)
        d["decoder"]["embedding"] = self.decoder.embedding.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(encoder=EncoderConfig(**d.get("encoder", {})),
                   decoder=DecoderConfig(**d.get("decoder", {})))

    @classmethod
    def toy(cls, **encoder_overrides):
        """Small configuration for desk-scale experiments."""
        enc = dict(stage_channels=(8, 16, 32, 64), grid_sizes=((8, 8), (8, 8), (8, 8)), fmm_rank=4)
        enc.update(encoder_overrides)
        return cls(encoder=EncoderConfig(**enc))

    def head_size(self, shapes):
        r = self.encoder.fmm_rank
        return sum(fmm_param_count(i, o, r)[1] for i, o in shapes)


def pool_matrix(n_in, n_out):
    """Adaptive average pooling weights: bin i covers [floor(i n/g), ceil((i+1) n/g))."""
    if n_out > n_in:
        raise ValueError(f"cannot pool {n_in} samples into {n_out} bins")
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -(-((i + 1) * n_in) // n_out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def pool_to_grid(feat, grid_h, grid_w):
    """Adaptive average pooling of a (C, H, W) map to (grid_h, grid_w, C)."""
    feat = np.asarray(feat, dtype=np.float64)
    _, h, w = feat.shape
    if grid_h > h or grid_w > w:
        raise ValueError(f"grid {grid_h}x{grid_w} larger than the {h}x{w} stage map")
    with ad.no_grad():
        return ad.separable_pool(ad.const(feat), pool_matrix(h, grid_h), pool_matrix(w, grid_w)).value


# ----------------------------------------------------------------- weights

def init_weights(cfg, seed=0):
    """Fresh trainable tensors keyed by name (float64)."""
    rng = np.random.default_rng(seed)
    enc, dec = cfg.encoder, cfg.decoder
    r = enc.fmm_rank
    w = {}
    c_in = 4
    for k, c in enumerate(enc.stage_channels):
        fan = c_in * 9
        w[f"enc.{k}.w"] = rng.normal(0.0, np.sqrt(2.0 / fan), (c, c_in, 3, 3))
        w[f"enc.{k}.b"] = np.zeros(c)
        c_in = c

    def head(prefix, shapes, c):
        size = cfg.head_size(shapes)
        w[f"head.{prefix}.w"] = rng.normal(0.0, 0.1 / np.sqrt(c), (c, size))
        b = np.zeros(size)
        o = 0
        # modulation starts at mod_a @ mod_b == 1, so the effective weight is the base
        for i, out in shapes:
            b[o:o + out * r] = 1.0
            o += out * r
            b[o:o + r * i] = 1.0 / r
            o += r * i + out
        w[f"head.{prefix}.b"] = b
        for l, (i, out) in enumerate(shapes):
            w[f"base.{prefix}.{l}"] = rng.normal(0.0, np.sqrt(2.0 / i), (out, i))

    for k in range(len(dec.block_depths)):
        head(f"block{k}", dec.block_shapes(k), enc.stage_channels[k])
    head("app", dec.app_shapes(), enc.stage_channels[3])
    if enc.lut_head:
        c = enc.stage_channels[3]
        w["head.lut.w"] = rng.normal(0.0, 1e-3 / np.sqrt(c), (c, enc.lut_dim ** 3 * 3))
        w["head.lut.b"] = np.zeros(enc.lut_dim ** 3 * 3)
    return w


def weight_shapes(cfg):
    return {k: v.shape for k, v in init_weights(cfg, 0).items()}


# ------------------------------------------------------------------- graph

def encoder_inputs(img, mask, size):
    """(4, size, size) encoder input: composite RGB and mask, bilinearly resized."""
    img = check_image(img)
    mask = check_mask(mask, img.shape)
    x = np.empty((4, size, size))
    x[:3] = np.moveaxis(resize_bilinear(img, size, size), 2, 0)
    x[3] = resize_bilinear(mask, size, size)
    return x


def encode_graph(P, x):
    feats = []
    h = ad.const(x)
    for k in range(4):
        h = ad.leaky_relu(ad.conv3x3_s2(h, P[f"enc.{k}.w"], P[f"enc.{k}.b"]), LEAKY_SLOPE)
        feats.append(h)
    return feats


def _split_head(out, shapes, r):
    """Slice a (cells, P) head output into per-layer (mod_a, mod_b, bias) Vars."""
    cells = out.shape[0]
    layers = []
    o = 0
    for i, n in shapes:
        mod_a = ad.reshape(ad.getitem(out, (slice(None), slice(o, o + n * r))), (cells, n, r))
        o += n * r
        mod_b = ad.reshape(ad.getitem(out, (slice(None), slice(o, o + r * i))), (cells, r, i))
        o += r * i
        bias = ad.getitem(out, (slice(None), slice(o, o + n)))
        o += n
        layers.append((mod_a, mod_b, bias))
    return layers


def heads_graph(P, cfg, feats):
    """Per-block grid factors, appearance factors and LUT lattice as Vars.

    Returns a dict with ``blocks`` (list of lists of (base, mod_a, mod_b, bias)),
    ``app`` (same, one cell) and ``lut`` (lattice Var or None).
    """
    enc, dec = cfg.encoder, cfg.decoder
    r = enc.fmm_rank
    blocks = []
    for k in range(len(dec.block_depths)):
        gh, gw = enc.grid_sizes[k]
        f = feats[k]
        _, h, w = f.shape
        pooled = ad.separable_pool(f, pool_matrix(h, gh), pool_matrix(w, gw))
        pooled = ad.reshape(pooled, (gh * gw, f.shape[0]))
        out = ad.add(ad.matmul(pooled, P[f"head.block{k}.w"]), P[f"head.block{k}.b"])
        shapes = dec.block_shapes(k)
        factors = _split_head(out, shapes, r)
        blocks.append([(P[f"base.block{k}.{l}"],) + fac for l, fac in enumerate(factors)])
    deep = ad.reshape(ad.mean_axes(feats[3], (1, 2)), (1, feats[3].shape[0]))
    out = ad.add(ad.matmul(deep, P["head.app.w"]), P["head.app.b"])
    app = [(P[f"base.app.{l}"],) + fac for l, fac in enumerate(_split_head(out, dec.app_shapes(), r))]
    lut = None
    if enc.lut_head:
        d = enc.lut_dim
        res = ad.add(ad.matmul(deep, P["head.lut.w"]), P["head.lut.b"])
        lut = ad.add(ad.reshape(res, (d, d, d, 3)), identity_lattice(d))
    return {"blocks": blocks, "app": app, "lut": lut}


# ---------------------------------------------------------------- inference

def encode(img_s, mask_s, weights):
    """Stage feature maps for an encoder-sized composite and mask."""
    img_s = check_image(img_s)
    size = img_s.shape[0]
    if img_s.shape[:2] != (size, size) or size % 16:
        raise ValueError(f"encoder input must be square with a side divisible by 16, got {img_s.shape[:2]}")
    x = np.empty((4, size, size))
    x[:3] = np.moveaxis(img_s, 2, 0)
    x[3] = check_mask(mask_s, img_s.shape)
    with ad.no_grad():
        P = {k: ad.const(v) for k, v in weights.items() if k.startswith("enc.")}
        return [f.value for f in encode_graph(P, x)]


def _to_grid(layers, gh, gw):
    return LocalMLPGrid(gh, gw, [GridLayer(b.value, a.value, m.value, c.value) for b, a, m, c in layers])


def unpack_decoder_params(feats, weights, cfg):
    """DecoderParams predicted from stage feature maps."""
    with ad.no_grad():
        P = {k: ad.const(v) for k, v in weights.items()}
        heads = heads_graph(P, cfg, [ad.const(f) for f in feats])
    dec = cfg.decoder
    blocks = [
        LripBlock(_to_grid(layers, *cfg.encoder.grid_sizes[k]), dec.block_scales[k], dec.block_depths[k])
        for k, layers in enumerate(heads["blocks"])
    ]
    lut = Lut3D(heads["lut"].value) if heads["lut"] is not None else None
    return DecoderParams(blocks, _to_grid(heads["app"], 1, 1), dec.embedding, lut)


def predict_decoder_params(img, mask, weights, cfg):
    """Encode a composite at any resolution (resized to the encoder size) and unpack."""
    size = cfg.encoder.input_size
    x = encoder_inputs(img, mask, size)
    feats = encode(np.moveaxis(x[:3], 0, 2), x[3], weights)
    return unpack_decoder_params(feats, weights, cfg)
