"""Desk-scale training: differentiable graph, L2 + LUT loss, Random Step Crop,
optimizers, cosine schedule, finite-difference gradient checks and a
single-pair overfit experiment.

The training graph mirrors the inference path op for op: the encoder and the
heads are shared code, and the decoder uses the same query pyramid and
kernels.  Decoder outputs are blended with the mask before the L2 loss, the
same way the pipeline assembles its output.  When the LUT head is on, the LUT-mapped
composite is supervised as well and its lattice is regularised against
overflowing [0, 1].
"""

import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .decoder import LEAKY_SLOPE, build_pyramid, release_pyramid, cell_index
from .coords import EmbeddingConfig, embed_vectors, grid_coords
from .encoder import DecoderConfig, EncoderConfig, ModelConfig, encode_graph, encoder_inputs, heads_graph
from .imaging import check_image, check_mask, psnr, resize_bilinear, sample_resized
from .lut import corner_weights, identity_lattice, lut_overflow_penalty
from .model import Model


@dataclass
class LossConfig:
    lambda_lut: float = 0.01
    lut_head_enabled: bool = True
    lut_l2_weight: float = 1.0
    blend: bool = True

    def __post_init__(self):
        if self.lambda_lut < 0:
            raise ValueError("lambda_lut must be >= 0")


@dataclass
class RscConfig:
    crop_size: int = 256
    stride_multiple: int = 4
    rng_seed: int = 0

    def __post_init__(self):
        if self.stride_multiple < 1 or self.crop_size % self.stride_multiple:
            raise ValueError("crop_size must be divisible by stride_multiple")


@dataclass
class TrainSchedule:
    phase1_epochs: int = 0
    phase2_epochs: int = 0
    lr_size: int = 256
    lr: float = 1e-3
    lr_min: float = 1e-5
    batch_size: int = 1
    optimizer: str = "adamw"
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError("optimizer must be 'adamw' or 'sgd'")


@dataclass
class TrainSample:
    composite: np.ndarray
    mask: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        self.composite = check_image(self.composite)
        self.mask = check_mask(self.mask, self.composite.shape)
        self.target = check_image(self.target)
        if self.target.shape != self.composite.shape:
            raise ValueError("target and composite differ in shape")

    @property
    def shape(self):
        return self.composite.shape[:2]


# ----------------------------------------------------------------- losses

def loss(pred, target, lut=None, cfg=None):
    """Mean squared error over the batch plus the weighted LUT overflow penalty."""
    cfg = LossConfig() if cfg is None else cfg
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    d = pred - target
    value = float(np.mean(d * d))
    if lut is not None:
        value += cfg.lambda_lut * lut_overflow_penalty(lut)
    return value


def _penalty_graph(lattice):
    tape = ad._tape.get()
    if tape is not None:
        tape.signature.append(np.packbits(lattice.value > 1.0))
        tape.signature.append(np.packbits(lattice.value < 0.0))
    over = ad.relu_squared(ad.sub(lattice, 1.0))
    under = ad.relu_squared(ad.mul(lattice, -1.0))
    return ad.mean(ad.add(over, under))


def _mse_graph(pred, target):
    return ad.mean(ad.square(ad.sub(pred, target)))


def _blend(decoded, base, m):
    return ad.add(base, ad.mul(m[:, None], ad.sub(decoded, base)))


# ------------------------------------------------------------------ graph

def decoder_graph(heads, cfg, pyramid):
    """Differentiable decoder over a query pyramid; returns (n, 3) RGB."""
    dec, enc = cfg.decoder, cfg.encoder
    prev = None
    for k, level in enumerate(pyramid.levels):
        emb = embed_vectors(level.vectors, dec.embedding)
        if prev is None:
            h = ad.const(emb)
        else:
            h = ad.concat([emb, ad.gather_blend(prev, level.up_index, level.up_weight)], axis=1)
        gh, gw = enc.grid_sizes[k]
        i, j = cell_index(level.vectors[:, 0], level.vectors[:, 1], gh, gw)
        h = _routed_mlp(h, i * gw + j, heads["blocks"][k])
        prev = h
    cells = np.zeros(prev.shape[0], dtype=np.int64)
    return _routed_mlp(prev, cells, heads["app"])


def _routed_mlp(h, cells, layers):
    last = len(layers) - 1
    for l, (base, mod_a, mod_b, bias) in enumerate(layers):
        w = ad.fmm(base, mod_a, mod_b)
        h = ad.routed_affine(h, cells, w, bias, l < last, LEAKY_SLOPE)
    return h


def forward_loss(P, cfg, sample, index=None, loss_cfg=None):
    """Scalar loss Var for ``sample`` restricted to the flat pixel ``index`` (default all)."""
    loss_cfg = LossConfig() if loss_cfg is None else loss_cfg
    comp, mask, target = sample.composite, sample.mask, sample.target
    x = encoder_inputs(comp, mask, cfg.encoder.input_size)
    heads = heads_graph(P, cfg, encode_graph(P, x))
    pyr = build_pyramid(comp, mask, cfg.decoder.block_scales, index=index, tag="train/pyramid")
    try:
        rgb = decoder_graph(heads, cfg, pyr)
        idx = pyr.output_index
    finally:
        release_pyramid(pyr)
    base = comp.reshape(-1, 3)[idx]
    m = mask.reshape(-1)[idx]
    tgt = target.reshape(-1, 3)[idx]
    pred = _blend(rgb, base, m) if loss_cfg.blend else rgb
    total = _mse_graph(pred, tgt)
    lattice = heads["lut"]
    if lattice is not None and loss_cfg.lut_head_enabled:
        d = lattice.shape[0]
        cidx, cw = corner_weights(base, d)
        mapped = ad.lut_apply(lattice, np.clip(base, 0.0, 1.0), cidx, cw, identity_lattice(d))
        lut_pred = _blend(mapped, base, m) if loss_cfg.blend else mapped
        if loss_cfg.lut_l2_weight:
            total = ad.add(total, ad.mul(_mse_graph(lut_pred, tgt), loss_cfg.lut_l2_weight))
        if loss_cfg.lambda_lut:
            total = ad.add(total, ad.mul(_penalty_graph(lattice), loss_cfg.lambda_lut))
    return total


def loss_value(model, sample, index=None, loss_cfg=None):
    with ad.no_grad():
        P = {k: ad.const(v) for k, v in model.weights.items()}
        return float(forward_loss(P, model.config, sample, index, loss_cfg).value)


def loss_and_grads(weights, cfg, sample, index=None, loss_cfg=None):
    P = {k: ad.param(v, k) for k, v in weights.items()}
    with ad.recording():
        total = forward_loss(P, cfg, sample, index, loss_cfg)
        ad.backward(total)
    grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in P.items()}
    return float(total.value), grads


# ----------------------------------------------------------- random crops

@dataclass
class RscCrop:
    top: int
    left: int
    size: int
    index: np.ndarray
    planes: dict = field(default_factory=dict)


def rsc_crop(sample, cfg, rng=None, scales=(1, 2, 4)):
    """Random Step Crop: an aligned window at full scale and on each downsampled plane.

    The corner is drawn uniformly from positions divisible by
    ``stride_multiple``.  ``planes[s]`` holds ``(image, mask, target, coords)``
    cropped from the factor-``s`` bilinear downsampling of the full image, with
    coordinates measured in the full image.
    """
    rng = np.random.default_rng(cfg.rng_seed) if rng is None else rng
    h, w = sample.shape
    c, s = cfg.crop_size, cfg.stride_multiple
    if h < c or w < c:
        raise ValueError(f"image {h}x{w} is smaller than the {c}x{c} crop")
    top = s * int(rng.integers(0, (h - c) // s + 1))
    left = s * int(rng.integers(0, (w - c) // s + 1))
    rows, cols = np.meshgrid(np.arange(top, top + c), np.arange(left, left + c), indexing="ij")
    crop = RscCrop(top, left, c, (rows * w + cols).ravel())
    for f in scales:
        if h % f or w % f or top % f or c % f:
            raise ValueError(f"crop is not aligned with the factor-{f} plane")
        hs, ws, n = h // f, w // f, c // f
        r, q = np.meshgrid(np.arange(top // f, top // f + n), np.arange(left // f, left // f + n), indexing="ij")
        r, q = r.ravel(), q.ravel()
        crop.planes[f] = (
            sample_resized(sample.composite, hs, ws, r, q).reshape(n, n, 3),
            sample_resized(sample.mask, hs, ws, r, q).reshape(n, n),
            sample_resized(sample.target, hs, ws, r, q).reshape(n, n, 3),
            grid_coords(hs, ws, r * ws + q).reshape(n, n, 2),
        )
    return crop


# --------------------------------------------------------------- optimizers

class SGD:
    """Plain gradient descent with optional decoupled weight decay."""

    def __init__(self, weight_decay=0.0):
        self.weight_decay = weight_decay
        self.t = 0

    def step(self, weights, grads, lr):
        self.t += 1
        for k, g in grads.items():
            w = weights[k]
            if self.weight_decay:
                w -= lr * self.weight_decay * w
            w -= lr * g


class AdamW:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, weights, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            w = weights[k]
            if self.weight_decay:
                w -= lr * self.weight_decay * w
            w -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name, weight_decay=0.0):
    if name == "adamw":
        return AdamW(weight_decay=weight_decay)
    if name == "sgd":
        return SGD(weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {name!r}")


def cosine_lr(step, total, lr_max, lr_min=0.0):
    if total <= 0:
        return lr_max
    c = 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))
    return lr_max * c + lr_min * (1.0 - c)


# ----------------------------------------------------------------- training

def train_step(model, batch, optimizer, lr, loss_cfg=None):
    """One optimizer step on ``batch``: a list of ``(TrainSample, index_or_None)``.

    Returns the mean loss.  Raises FloatingPointError on a non-finite loss or
    gradient, leaving the weights untouched.
    """
    grads = None
    total = 0.0
    for sample, index in batch:
        value, g = loss_and_grads(model.weights, model.config, sample, index, loss_cfg)
        total += value
        if grads is None:
            grads = g
        else:
            for k in grads:
                grads[k] += g[k]
    n = len(batch)
    total /= n
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if not math.isfinite(total) or bad:
        raise FloatingPointError(f"non-finite training state: loss={total}, bad gradients in {bad[:5]}")
    if n > 1:
        for g in grads.values():
            g /= n
    optimizer.step(model.weights, grads, lr)
    return total


def _resized(sample, size):
    if sample.shape == (size, size):
        return sample
    return TrainSample(resize_bilinear(sample.composite, size, size),
                       np.clip(resize_bilinear(sample.mask, size, size), 0.0, 1.0),
                       resize_bilinear(sample.target, size, size))


def fit(model, samples, schedule, rsc=None, loss_cfg=None, log=None):
    """Progressive training: full low-resolution images first, then RSC crops at full resolution.

    Returns a list of ``(step, phase, loss, lr)`` records.
    """
    rsc = RscConfig() if rsc is None else rsc
    opt = make_optimizer(schedule.optimizer, schedule.weight_decay)
    rng = np.random.default_rng(rsc.rng_seed)
    per_epoch = max(1, math.ceil(len(samples) / schedule.batch_size))
    total = (schedule.phase1_epochs + schedule.phase2_epochs) * per_epoch
    low = [_resized(s, schedule.lr_size) for s in samples] if schedule.phase1_epochs else []
    trace = []
    step = 0
    for phase, epochs in ((1, schedule.phase1_epochs), (2, schedule.phase2_epochs)):
        for _ in range(epochs):
            order = rng.permutation(len(samples))
            for b in range(per_epoch):
                ids = order[b * schedule.batch_size:(b + 1) * schedule.batch_size]
                if phase == 1:
                    batch = [(low[i], None) for i in ids]
                else:
                    batch = [(samples[i], rsc_crop(samples[i], rsc, rng).index) for i in ids]
                lr = cosine_lr(step, total, schedule.lr, schedule.lr_min)
                value = train_step(model, batch, opt, lr, loss_cfg)
                trace.append((step, phase, value, lr))
                if log is not None:
                    log(step, phase, value, lr)
                step += 1
    return trace


@dataclass
class OverfitResult:
    model: Model
    trace: list
    psnr_trace: list
    seconds: float


def fit_overfit(sample, steps, model=None, lr=3e-3, lr_min=1e-4, eval_every=250, loss_cfg=None,
                optimizer="adamw", seed=0, target_psnr=None, log=None):
    """Fit one composite/target pair; returns losses and PSNR checkpoints.

    ``psnr_trace`` holds ``(step, decoder_psnr, lut_psnr_or_None)``; step 0 is
    the untrained model.  Stops early once ``target_psnr`` is reached at a
    checkpoint (both heads, when the LUT head is on).
    """
    from .pipeline import harmonize, harmonize_lut

    model = Model.create(ModelConfig.toy(), seed) if model is None else model
    opt = make_optimizer(optimizer)
    t0 = time.perf_counter()

    def evaluate(step):
        out = harmonize(sample.composite, sample.mask, model)
        lut_p = None
        if model.config.encoder.lut_head:
            lut_p = psnr(harmonize_lut(sample.composite, sample.mask, model), sample.target)
        rec = (step, psnr(out, sample.target), lut_p)
        if log is not None:
            log(f"step {step}: decoder {rec[1]:.2f} dB" + (f", lut {lut_p:.2f} dB" if lut_p else ""))
        return rec

    trace = []
    psnrs = [evaluate(0)]
    for step in range(steps):
        value = train_step(model, [(sample, None)], opt, cosine_lr(step, steps, lr, lr_min), loss_cfg)
        trace.append(value)
        if (step + 1) % eval_every == 0 or step + 1 == steps:
            psnrs.append(evaluate(step + 1))
            if target_psnr is not None and psnrs[-1][1] > target_psnr[0] and \
                    (psnrs[-1][2] is None or psnrs[-1][2] > target_psnr[1]):
                break
    return OverfitResult(model, trace, psnrs, time.perf_counter() - t0)


# ------------------------------------------------------------ gradient check

def gradcheck_config():
    """Toy architecture small enough for exhaustive finite differences."""
    return ModelConfig(
        encoder=EncoderConfig(input_size=16, stage_channels=(4, 4, 6, 8),
                              grid_sizes=((2, 2), (2, 2), (2, 2)), fmm_rank=2, lut_head=True, lut_dim=3),
        decoder=DecoderConfig(hidden_width=8, embedding=EmbeddingConfig(num_frequencies=2)),
    )


def make_synthetic_pair(size=64, seed=0, jitter=0.15):
    """Smooth textured target with an elliptical foreground recoloured by an affine colour jitter."""
    rng = np.random.default_rng(seed)
    h = w = size
    yy, xx = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    target = np.empty((h, w, 3))
    for ch in range(3):
        a, b, c = rng.uniform(-0.3, 0.3, 3)
        f1, f2 = rng.uniform(2.0, 6.0, 2)
        p1, p2 = rng.uniform(0, 2 * np.pi, 2)
        target[..., ch] = (0.5 + a * xx + b * yy + c * xx * yy
                           + 0.12 * np.sin(2 * np.pi * f1 * xx + p1) * np.cos(2 * np.pi * f2 * yy + p2))
    target = np.clip(target, 0.02, 0.98)
    cy, cx = rng.uniform(0.35, 0.65, 2)
    ry, rx = rng.uniform(0.2, 0.3, 2)
    mask = ((((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) <= 1.0).astype(np.float64)
    A = np.eye(3) + rng.normal(0.0, jitter, (3, 3))
    t = rng.uniform(-jitter, jitter, 3)
    shifted = np.clip(target @ A.T + t, 0.0, 1.0)
    comp = np.where(mask[..., None] > 0.5, shifted, target)
    return TrainSample(comp, mask, target)


@dataclass
class GradcheckReport:
    max_rel_error: float
    per_tensor: dict
    checks: int
    skipped_kinks: int
    eps: float

    def passed(self, tol=1e-4):
        return self.max_rel_error < tol

    def to_dict(self):
        return asdict(self)


def _fd_loss(weights, cfg, sample, index, loss_cfg):
    P = {k: ad.const(v) for k, v in weights.items()}
    with ad.no_grad(), ad.recording() as tape:
        value = float(forward_loss(P, cfg, sample, index, loss_cfg).value)
        sig = [s.tobytes() for s in tape.signature]
    return value, sig


def gradcheck(seed=0, eps=1e-4, coords_per_tensor=8, directions=2, floor=1e-6, max_tries=20):
    """Compare analytic gradients with central differences on an 8x8 RSC crop.

    Each tensor is checked along random coordinate and random unit directions.
    A probe whose +/- eps evaluations change any activation or penalty sign
    pattern straddles a kink, where central differences are invalid.  Such
    probes are redrawn.  ``floor`` bounds the denominator of the relative
    error, scaled by ``max(1, |loss|)``: roundoff in the differenced loss is
    ~1e-12 |loss| at eps=1e-4, so gradients far below the floor are compared in
    absolute terms.
    """
    cfg = gradcheck_config()
    rng = np.random.default_rng(seed)
    model = Model.create(cfg, seed)
    w = model.weights
    for k in w:
        if k.startswith("head."):
            w[k] = w[k] + rng.normal(0.0, 0.3, w[k].shape) * (0.3 if k.endswith(".w") else 1.0)
    sample = make_synthetic_pair(16, seed)
    crop = rsc_crop(sample, RscConfig(crop_size=8, stride_multiple=4, rng_seed=seed), rng)
    loss_cfg = LossConfig(lambda_lut=0.5)

    base_loss, grads = loss_and_grads(w, cfg, sample, crop.index, loss_cfg)
    floor *= max(1.0, abs(base_loss))
    _, base_sig = _fd_loss(w, cfg, sample, crop.index, loss_cfg)

    def fd(name, u):
        orig = w[name]
        w[name] = orig + eps * u
        lp, sp = _fd_loss(w, cfg, sample, crop.index, loss_cfg)
        w[name] = orig - eps * u
        lm, sm = _fd_loss(w, cfg, sample, crop.index, loss_cfg)
        w[name] = orig
        if sp != base_sig or sm != base_sig:
            return None
        return (lp - lm) / (2.0 * eps)

    per_tensor = {}
    checks = skipped = 0
    for name in sorted(w):
        g = grads[name]
        errs = []
        size = w[name].size
        probes = [("coord", int(i)) for i in
                  (range(size) if size <= coords_per_tensor else rng.choice(size, coords_per_tensor, replace=False))]
        probes += [("dir", None)] * directions
        for kind, i in probes:
            for _ in range(max_tries):
                if kind == "coord":
                    u = np.zeros(size)
                    u[i] = 1.0
                else:
                    u = rng.normal(size=size)
                    u /= np.linalg.norm(u)
                u = u.reshape(w[name].shape)
                num = fd(name, u)
                if num is not None:
                    break
                skipped += 1
                if kind == "coord":
                    i = int(rng.integers(size))
            else:
                raise RuntimeError(f"could not find a kink-free probe for {name}")
            ana = float(np.sum(g * u))
            errs.append(abs(num - ana) / max(abs(num), abs(ana), floor))
            checks += 1
        per_tensor[name] = float(max(errs))
    return GradcheckReport(max(per_tensor.values()), per_tensor, checks, skipped, eps)
