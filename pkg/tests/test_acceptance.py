"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest -v -s tests/test_acceptance.py``; the verdict
lines are printed even without ``-s``.
"""

import itertools
import time

import numpy as np
import pytest

from hinet.bench import measure_rsc_step, measure_tiled, synthetic_source
from hinet.coords import EmbeddingConfig
from hinet.decoder import (DecoderParams, LripBlock, build_pyramid, decoder_forward, interp_mlp, interp_weights,
                           local_forward_nearest, mlp_forward)
from hinet.encoder import ModelConfig
from hinet.imaging import fmse, mse, psnr, ssim
from hinet.lut import Lut3D, export_cube, import_cube, lut_apply, lut_identity, lut_interp, lut_overflow_penalty
from hinet.model import Model
from hinet.pipeline import harmonize, harmonize_region, harmonize_tiled, plan_tiles_count, predict_lut
from hinet.training import LossConfig, RscConfig, fit_overfit, gradcheck, loss_value, make_synthetic_pair, rsc_crop

import oracles
from helpers import constant_grid, linear_grid, random_grid


@pytest.fixture
def verdict(capsys):
    def report(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, f"criterion {number} failed: {detail}"

    return report


def triples(n=20, size=64):
    """Random (image, mask, model seed) triples with rectangular or soft masks."""
    rng = np.random.default_rng(2024)
    for k in range(n):
        img = rng.random((size, size, 3))
        mask = np.zeros((size, size))
        r0, c0 = rng.integers(0, size // 2, 2)
        h, w = rng.integers(4, size // 2, 2)
        mask[r0:r0 + h, c0:c0 + w] = 1.0
        if k % 3 == 0:
            mask[r0, c0:c0 + w] = 0.5
        yield img, mask, k


def test_criterion_1_interpolation_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_sum = worst_oracle = 0.0
    negative = False
    for _ in range(10_000):
        gh, gw = rng.integers(2, 17, 2)
        x, y = rng.random(2)
        cells, w = interp_weights(x, y, gh, gw)
        negative |= bool(np.any(w < 0))
        worst_sum = max(worst_sum, abs(w.sum() - 1.0))
        got = {}
        for c, v in zip(cells, w):
            got[int(c)] = got.get(int(c), 0.0) + v
        ref = oracles.area_ratio_weights(x, y, gh, gw)
        worst_oracle = max(worst_oracle, max(abs(got.get(c, 0.0) - ref.get(c, 0.0)) for c in set(got) | set(ref)))
    centres_ok = True
    for gh, gw in ((2, 2), (3, 5), (16, 16)):
        grid = random_grid(rng, gh, gw, [4, 5, 3])
        for i, j in itertools.product(range(gh), range(gw)):
            p, ref = interp_mlp(grid, (j + 0.5) / gw, (i + 0.5) / gh), grid.cell_params(i, j)
            centres_ok &= all(np.array_equal(a, b) for a, b in zip(p.weights + p.biases, ref.weights + ref.biases))
    seconds = time.perf_counter() - t0
    ok = not negative and worst_sum <= 1e-12 and worst_oracle <= 1e-12 and centres_ok and seconds < 10
    verdict(1, ok, f"sum err {worst_sum:.1e}, oracle err {worst_oracle:.1e}, centres bitwise {centres_ok}, "
                   f"{seconds:.1f}s")


def test_criterion_2_gradient_check(verdict):
    t0 = time.perf_counter()
    report = gradcheck(seed=0, eps=1e-4)
    seconds = time.perf_counter() - t0
    ok = report.passed(1e-4) and seconds < 300 and len(report.per_tensor) > 0
    verdict(2, ok, f"max rel err {report.max_rel_error:.2e} over {len(report.per_tensor)} tensors, {seconds:.1f}s")


def test_criterion_3_tiled_equals_full(verdict):
    mismatches = 0
    runs = 0
    for img, mask, seed in triples():
        model = Model.create(ModelConfig.toy(), seed)
        params = model.decoder_params(img, mask)
        full = harmonize(img, mask, model, params=params)
        for tiles in (1, 2, 4, 8):
            runs += 1
            mismatches += not np.array_equal(harmonize_tiled(img, mask, model, plan_tiles_count(64, 64, tiles),
                                                             params=params), full)
    verdict(3, mismatches == 0, f"{runs - mismatches}/{runs} tiled runs bitwise equal")


def test_criterion_4_region_equals_full(verdict):
    bad = 0
    for img, mask, seed in triples():
        model = Model.create(ModelConfig.toy(), seed)
        params = model.decoder_params(img, mask)
        full = harmonize(img, mask, model, params=params)
        region = harmonize_region(img, mask, model, params=params)
        fg = mask > 0.5
        bad += not (np.array_equal(region[fg], full[fg]) and np.array_equal(region[~fg], img[~fg]))
    verdict(4, bad == 0, f"{20 - bad}/20 triples: foreground exact, background bitwise")


def _full_loss_on(model, sample, index, cfg):
    """Full-image inference, then every loss term restricted to ``index``."""
    params = model.decoder_params(sample.composite, sample.mask)
    rgb = decoder_forward(params, build_pyramid(sample.composite, sample.mask, params.scales))
    base = sample.composite.reshape(-1, 3)[index]
    m = sample.mask.reshape(-1)[index, None]
    tgt = sample.target.reshape(-1, 3)[index]
    value = np.mean((base + m * (rgb[index] - base) - tgt) ** 2)
    lut = predict_lut(sample.composite, sample.mask, model)
    mapped = lut_apply(lut, base)
    value += cfg.lut_l2_weight * np.mean((base + m * (mapped - base) - tgt) ** 2)
    return value + cfg.lambda_lut * lut_overflow_penalty(lut)


def test_criterion_5_rsc_estimator(verdict):
    model = Model.create(ModelConfig.toy(), 5)
    model.weights["head.lut.w"] *= 50.0  # push some lattice entries outside [0, 1]
    sample = make_synthetic_pair(64, 5)
    cfg = LossConfig()
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(50):
        crop = rsc_crop(sample, RscConfig(crop_size=32, stride_multiple=4), rng)
        got = loss_value(model, sample, crop.index, cfg)
        ref = _full_loss_on(model, sample, crop.index, cfg)
        worst = max(worst, abs(got - ref) / max(abs(ref), 1e-12))
    verdict(5, worst <= 1e-6, f"max relative loss difference {worst:.1e} over 50 crops")


def test_criterion_6_memory(verdict):
    model = Model.create(ModelConfig.toy(), 6)
    s = synthetic_source(512, 6)
    params = model.decoder_params(s.composite, s.mask)
    one = measure_tiled(s.composite, s.mask, model, 1, params).peak_transient_floats
    four = measure_tiled(s.composite, s.mask, model, 4, params).peak_transient_floats
    ratio = four / one
    small = measure_rsc_step(synthetic_source(256, 7), model, 64).peak_transient_floats
    large = measure_rsc_step(synthetic_source(1024, 7), model, 64).peak_transient_floats
    drift = abs(large - small) / small
    verdict(6, ratio < 0.35 and drift <= 0.01,
            f"(a) T=4/T=1 peak ratio {ratio:.3f}; (b) RSC peak 256 vs 1024 differ by {drift:.2%}")


def test_criterion_7_boundary_continuity(verdict):
    grid = constant_grid([0.0, 1.0], 1, 2, in_dim=3)
    v = np.zeros((2, 3))
    near = local_forward_nearest(grid, v, np.array([[0.5 - 1e-6, 0.5], [0.5, 0.5]]))
    j_nearest = abs(near[1, 0] - near[0, 0])
    eps = 1e-3
    a = mlp_forward(interp_mlp(grid, 0.5 - eps / 2, 0.5), v[0])
    b = mlp_forward(interp_mlp(grid, 0.5 + eps / 2, 0.5), v[0])
    j_interp = abs(b[0] - a[0])

    emb = EmbeddingConfig(num_frequencies=0)
    app = linear_grid(np.ones((3, 1)))
    prior = np.zeros((1, emb.dim + 1))
    prior[0, -1] = 1.0
    nearest_dec = DecoderParams([LripBlock(constant_grid([0.0, 1.0], 1, 2, emb.dim), 1, 0)], app, emb)
    lrip_dec = DecoderParams([LripBlock(constant_grid([0.0, 1.0], 1, 2, emb.dim), 2, 0),
                              LripBlock(linear_grid(prior), 1, 0)], app, emb)
    img, mask = np.full((16, 16, 3), 0.5), np.ones((16, 16))

    def jump(params):
        out = decoder_forward(params, build_pyramid(img, mask, params.scales)).reshape(16, 16, 3)
        return np.abs(out[:, 8] - out[:, 7]).max()

    j_dec_near, j_dec_lrip = jump(nearest_dec), jump(lrip_dec)
    ok = j_nearest >= 0.9 and j_interp <= 5e-3 and j_dec_lrip < j_dec_near
    verdict(7, ok, f"nearest jump {j_nearest:.3f}, interpolated jump {j_interp:.1e}, "
                   f"decoder jump LRIP {j_dec_lrip:.3f} < nearest {j_dec_near:.3f}")


def test_criterion_8_lut_suite(verdict, tmp_path):
    rng = np.random.default_rng(8)
    colors = rng.random((10_000, 3))
    identity_ok = np.array_equal(lut_apply(lut_identity(17), colors), colors)
    worst = 0.0
    for d in (2, 5, 9):
        lut = Lut3D(rng.uniform(-0.2, 1.2, (d, d, d, 3)))
        c = rng.uniform(-0.05, 1.05, (200, 3))
        ref = np.array([oracles.trilinear_loop(lut.lattice, x) for x in c])
        worst = max(worst, np.abs(lut_apply(lut, c) - ref).max())
    a, b = Lut3D(rng.random((9, 9, 9, 3))), Lut3D(rng.random((9, 9, 9, 3)))
    interp_ok = (np.array_equal(lut_interp(a, b, 4, 4, 8).lattice, a.lattice)
                 and np.array_equal(lut_interp(a, b, 8, 4, 8).lattice, b.lattice)
                 and np.array_equal(lut_interp(a, b, 6, 4, 8).lattice, 0.5 * a.lattice + 0.5 * b.lattice))
    lut = Lut3D(rng.uniform(-0.3, 1.3, (17, 17, 17, 3)))
    export_cube(lut, tmp_path / "r.cube")
    cube_err = np.abs(import_cube(tmp_path / "r.cube").lattice - lut.lattice).max()
    ok = identity_ok and worst <= 1e-12 and interp_ok and cube_err <= 5e-7
    verdict(8, ok, f"identity exact {identity_ok}, trilinear err {worst:.1e}, interp exact {interp_ok}, "
                   f".cube err {cube_err:.1e}")


def test_criterion_9_overfit(verdict):
    sample = make_synthetic_pair(64, 0)
    res = fit_overfit(sample, 5000, model=Model.create(ModelConfig.toy(), 0), eval_every=250,
                      target_psnr=(35.0, 28.0))
    step, dec, lut = res.psnr_trace[-1]
    base = res.psnr_trace[0]
    ok = dec > 35.0 and lut > 28.0 and step <= 5000 and res.seconds < 900
    verdict(9, ok, f"decoder {dec:.2f} dB, LUT {lut:.2f} dB after {step} steps in {res.seconds:.0f}s "
                   f"(untrained {base[1]:.2f} / {base[2]:.2f} dB)")


def test_criterion_10_metric_oracles(verdict):
    rng = np.random.default_rng(10)
    worst = 0.0

    def rel(a, b):
        return abs(a - b) / max(abs(b), 1e-12)

    for _ in range(50):
        a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        m = (rng.random((16, 16)) > 0.5).astype(float)
        m[0, 0] = 1.0
        worst = max(worst, rel(mse(a, b), oracles.mse_loop(a, b)), rel(fmse(a, b, m), oracles.fmse_loop(a, b, m)),
                    rel(psnr(a, b), oracles.psnr_loop(a, b)), rel(ssim(a, b), oracles.ssim_loop(a, b)))
    verdict(10, worst <= 1e-6, f"max relative error {worst:.1e} over 50 pairs")
