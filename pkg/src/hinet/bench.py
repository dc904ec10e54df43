"""Instrumented memory and runtime measurements.

Peaks are counted in tracked float64 elements (see :mod:`hinet.probe`), so
they are deterministic and independent of the allocator.  Transient peaks
exclude the materialised decoder weights, which are a per-image constant.
"""

import csv
import io
import time
from dataclasses import dataclass

import numpy as np

from . import probe
from .pipeline import harmonize_tiled, plan_tiles_count
from .training import LossConfig, RscConfig, loss_and_grads, make_synthetic_pair, rsc_crop

CSV_FIELDS = ("height", "width", "tiles", "peak_transient_floats", "peak_live_floats", "seconds")


@dataclass
class Measurement:
    probe: probe.MemProbe
    seconds: float
    result: object = None

    @property
    def peak_transient_floats(self):
        return self.probe.peak_transient_floats


def measure(run, *args, **kwargs):
    """Run ``run(*args, **kwargs)`` under a fresh probe and a wall clock."""
    with probe.probing() as p:
        t0 = time.perf_counter()
        result = run(*args, **kwargs)
        seconds = time.perf_counter() - t0
    return Measurement(p, seconds, result)


def measure_tiled(img, mask, model, tiles, params=None):
    """Tiled harmonization with ``tiles`` row spans; decoder params are predicted outside the probe."""
    params = model.decoder_params(img, mask) if params is None else params
    plan = plan_tiles_count(img.shape[0], img.shape[1], tiles)

    def run():
        params.__dict__.pop("dense", None)  # re-materialise so the weights register as model floats
        return harmonize_tiled(img, mask, model, plan, params=params)

    return measure(run)


def measure_rsc_step(sample, model, crop_size, seed=0, loss_cfg=None):
    """Peak of one forward/backward pass on an RSC crop of ``sample``."""
    crop = rsc_crop(sample, RscConfig(crop_size=crop_size, stride_multiple=max(model.config.decoder.block_scales),
                                      rng_seed=seed))
    return measure(loss_and_grads, model.weights, model.config, sample, crop.index, loss_cfg or LossConfig())


def synthetic_source(size, seed=0):
    """A smooth random composite/target pair at ``size`` x ``size`` for benchmarks."""
    return make_synthetic_pair(size, seed)


def sweep_report(resolutions, tile_counts, model, seed=0, check=True):
    """Measure tiled inference over resolutions and tile counts.

    Returns a list of row dicts (see ``CSV_FIELDS``).  With ``check`` the
    transient peak must not increase with the tile count at any resolution.
    """
    rows = []
    for res in resolutions:
        h, w = (res, res) if np.isscalar(res) else res
        sample = synthetic_source(max(h, w), seed)
        img = sample.composite[:h, :w]
        mask = sample.mask[:h, :w]
        params = model.decoder_params(img, mask)
        peaks = []
        for t in sorted(tile_counts):
            m = measure_tiled(img, mask, model, t, params)
            peaks.append(m.peak_transient_floats)
            rows.append({"height": h, "width": w, "tiles": t,
                         "peak_transient_floats": m.peak_transient_floats,
                         "peak_live_floats": m.probe.peak_live_floats,
                         "seconds": round(m.seconds, 6)})
        if check and any(b > a for a, b in zip(peaks, peaks[1:])):
            raise AssertionError(f"transient peak grows with tile count at {h}x{w}: {peaks}")
    return rows


def to_csv(rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
