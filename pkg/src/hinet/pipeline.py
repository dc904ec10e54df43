"""End-to-end harmonization: full, tiled, region, arbitrary-resolution and LUT modes.

The encoder runs once per image on a 256x256 (config ``input_size``) resize.
The decoder is then queried at the requested pixels.  A query's result does
not depend on which other pixels share its batch, so tiles, regions and the
full image all produce identical values for the same pixel.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import probe
from .decoder import build_pyramid, decoder_forward, release_pyramid
from .encoder import encoder_inputs, encode, heads_graph
from . import autodiff as ad
from .imaging import check_image, check_mask, resize_bilinear
from .lut import Lut3D, lut_apply, lut_interp

MODES = ("full", "tiled", "region", "lut-only")


@dataclass
class TilePlan:
    """Row-span tiles ``[(row_start, row_stop), ...]`` covering an h x w image."""

    height: int
    width: int
    tiles: list
    max_batch: int

    def indices(self, k):
        r0, r1 = self.tiles[k]
        return np.arange(r0 * self.width, r1 * self.width, dtype=np.int64)

    def __len__(self):
        return len(self.tiles)


@dataclass
class HarmonizeOptions:
    mode: str = "full"
    max_batch: int = None
    target_h: int = None
    target_w: int = None
    blend_with_mask: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if (self.target_h is None) != (self.target_w is None):
            raise ValueError("target_h and target_w must be given together")


@dataclass
class DecodeStats:
    """Number of decoder queries per LRIP level, summed over tiles."""

    queries: list = field(default_factory=list)
    tiles: int = 0

    def add(self, pyramid):
        sizes = [lvl.size for lvl in pyramid.levels]
        self.queries = [a + b for a, b in zip(self.queries, sizes)] if self.queries else sizes
        self.tiles += 1


def plan_tiles(h, w, max_batch):
    """Greedy row spans of at most ``max_batch`` pixels each."""
    if max_batch < w:
        raise ValueError(f"max_batch {max_batch} is smaller than one row ({w} pixels)")
    rows = max_batch // w
    tiles = [(r, min(r + rows, h)) for r in range(0, h, rows)]
    return TilePlan(h, w, tiles, max_batch)


def plan_tiles_count(h, w, count):
    """Tile plan with ``count`` near-equal row spans."""
    rows = -(-h // max(1, count))
    return plan_tiles(h, w, rows * w)


# --------------------------------------------------------------- internals

def _assemble(decoded, base, weight, blend):
    """Clip ``decoded`` and blend it over ``base`` in place."""
    np.clip(decoded, 0.0, 1.0, out=decoded)
    if not blend:
        return decoded
    decoded -= base
    decoded *= weight[:, None]
    decoded += base
    return decoded


def _decode(params, img, mask, size, index, stats):
    pyr = build_pyramid(img, mask, params.scales, index=index, size=size)
    if stats is not None:
        stats.add(pyr)
    rgb = decoder_forward(params, pyr)
    release_pyramid(pyr)
    return pyr.output_index, rgb


def _targets(img, mask, size):
    h, w = size
    if img.shape[:2] == (h, w):
        return img, mask
    return (probe.track(resize_bilinear(img, h, w), "pipeline/resized"),
            probe.track(resize_bilinear(mask, h, w), "pipeline/resized"))


def _run(params, img, mask, size, index_sets, blend, stats=None):
    h, w = size
    base_img, base_mask = _targets(img, mask, size)
    out = probe.track(base_img.reshape(-1, 3).copy(), "pipeline/output")
    flat_mask = base_mask.reshape(-1)
    for index in index_sets:
        idx, rgb = _decode(params, img, mask, size, index, stats)
        base = probe.track(out[idx], "pipeline/blend") if blend else None
        out[idx] = _assemble(rgb, base, flat_mask[idx], blend)
        probe.release(rgb, base)
    probe.release(base_img, base_mask)
    return out.reshape(h, w, 3)


def _inputs(img, mask):
    img = check_image(img)
    mask = check_mask(mask, img.shape)
    return img, mask


def _params(model, img, mask, params):
    return model.decoder_params(img, mask) if params is None else params


# --------------------------------------------------------------- public API

def harmonize(img, mask, model, opts=None, params=None, stats=None):
    """Harmonize a composite according to ``opts`` (full mode by default)."""
    opts = HarmonizeOptions() if opts is None else opts
    img, mask = _inputs(img, mask)
    if opts.mode == "lut-only":
        return harmonize_lut(img, mask, model, blend=opts.blend_with_mask)
    params = _params(model, img, mask, params)
    if opts.mode == "region":
        return harmonize_region(img, mask, model, params=params, stats=stats, blend=opts.blend_with_mask)
    if opts.target_h is not None:
        size = (int(opts.target_h), int(opts.target_w))
    else:
        size = img.shape[:2]
    if opts.mode == "tiled":
        max_batch = opts.max_batch or size[0] * size[1]
        plan = plan_tiles(size[0], size[1], max_batch)
        return harmonize_tiled(img, mask, model, plan, params=params, stats=stats,
                               blend=opts.blend_with_mask)
    return _run(params, img, mask, size, [None], opts.blend_with_mask, stats)


def harmonize_tiled(img, mask, model, plan, params=None, stats=None, blend=True):
    """Decode tile by tile; peak decoder memory scales with the largest tile."""
    img, mask = _inputs(img, mask)
    params = _params(model, img, mask, params)
    size = (plan.height, plan.width)
    return _run(params, img, mask, size, (plan.indices(k) for k in range(len(plan))), blend, stats)


def foreground_index(mask):
    return np.flatnonzero(np.asarray(mask).reshape(-1) > 0.5)


def harmonize_region(img, mask, model, params=None, stats=None, blend=True):
    """Decode only foreground pixels; the background is copied from the input."""
    img, mask = _inputs(img, mask)
    fg = foreground_index(mask)
    if fg.size == 0:
        raise ValueError("region mode needs at least one foreground pixel")
    params = _params(model, img, mask, params)
    return _run(params, img, mask, img.shape[:2], [fg], blend, stats)


def harmonize_at_resolution(img, mask, model, target_h, target_w, params=None, stats=None, blend=True):
    """Harmonize directly at another resolution by querying intermediate coordinates."""
    if target_h < 1 or target_w < 1:
        raise ValueError("target dimensions must be >= 1")
    img, mask = _inputs(img, mask)
    params = _params(model, img, mask, params)
    return _run(params, img, mask, (int(target_h), int(target_w)), [None], blend, stats)


# --------------------------------------------------------------- LUT modes

def predict_lut(img, mask, model):
    """The LUT the model predicts for a composite (encoder + LUT head only)."""
    cfg = model.config
    if not cfg.encoder.lut_head:
        raise ValueError("this model has no LUT head")
    img, mask = _inputs(img, mask)
    x = encoder_inputs(img, mask, cfg.encoder.input_size)
    feats = encode(np.moveaxis(x[:3], 0, 2), x[3], model.weights)
    with ad.no_grad():
        P = {k: ad.const(v) for k, v in model.weights.items()}
        heads = heads_graph(P, cfg, [ad.const(f) for f in feats])
    return Lut3D(heads["lut"].value)


def apply_lut_to_image(img, mask, lut, blend=True):
    img, mask = _inputs(img, mask)
    mapped = lut_apply(lut, img.reshape(-1, 3))
    out = _assemble(mapped, img.reshape(-1, 3), mask.reshape(-1), blend)
    return out.reshape(img.shape)


def harmonize_lut(img, mask, model, blend=True, lut=None):
    lut = predict_lut(img, mask, model) if lut is None else lut
    return apply_lut_to_image(img, mask, lut, blend)


def keyframes(n_frames, interval):
    keys = list(range(0, n_frames, interval))
    if keys[-1] != n_frames - 1:
        keys.append(n_frames - 1)
    return keys


def harmonize_video_lut(frames, masks, model, keyframe_interval=1, report=None):
    """Predict LUTs on keyframes, interpolate them for the frames in between.

    The last frame is always treated as a keyframe so that every frame lies
    between two predicted LUTs.  ``report`` (a list) receives one dict per
    frame with its timing and keyframe status.
    """
    if len(frames) == 0:
        raise ValueError("empty video")
    if len(frames) != len(masks):
        raise ValueError("frames and masks differ in length")
    if keyframe_interval < 1:
        raise ValueError("keyframe interval must be >= 1")
    keys = keyframes(len(frames), keyframe_interval)
    luts = {}
    outputs = []
    for f, (img, mask) in enumerate(zip(frames, masks)):
        t0 = time.perf_counter()
        if f in keys:
            luts[f] = predict_lut(img, mask, model)
            lut = luts[f]
        else:
            m = max(k for k in keys if k < f)
            n = min(k for k in keys if k > f)
            if n not in luts:
                luts[n] = predict_lut(frames[n], masks[n], model)
            lut = lut_interp(luts[m], luts[n], f, m, n)
        outputs.append(apply_lut_to_image(img, mask, lut))
        if report is not None:
            report.append({"frame": f, "keyframe": f in keys, "seconds": time.perf_counter() - t0})
    return outputs
