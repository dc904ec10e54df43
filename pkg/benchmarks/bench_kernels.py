"""Compare the numba and pure-numpy kernel backends.

Runs each hot kernel on decoder-sized inputs with both implementations,
checks that they agree, and prints a timing table.  The end-to-end decode is
timed in a subprocess per backend because the backend is fixed at import.

    python benchmarks/bench_kernels.py [--pixels N] [--repeat R]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from hinet import kernels
from hinet.lut import corner_weights, identity_lattice


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(n, rng):
    cells, width, d = 64, 32, 7
    x = rng.normal(size=(n, 68))
    cell = rng.integers(0, cells, n)
    w = rng.normal(size=(cells, width, 68)) * 0.1
    b = rng.normal(size=(cells, width))
    gy = rng.normal(size=(n, width))
    src = rng.normal(size=(n // 4, width))
    index = rng.integers(0, n // 4, (n, 4))
    weight = rng.dirichlet(np.ones(4), n)
    rgb = rng.random((n, 3))
    lidx, lw = corner_weights(rgb, d)
    residual = (rng.random((d, d, d, 3)) - identity_lattice(d)).reshape(-1, 3) * 0.1
    grgb = rng.normal(size=(n, 3))

    return {
        "routed_affine": lambda k: k.routed_affine(x, cell, w, b, True, 0.2, np.empty((n, width))),
        "routed_affine_backward": lambda k: k.routed_affine_backward(
            x, cell, w, gy, np.empty_like(x), np.zeros_like(w), np.zeros_like(b)),
        "gather_blend": lambda k: k.gather_blend(src, index, weight, np.empty((n, width))),
        "gather_blend_backward": lambda k: k.gather_blend_backward(gy, index, weight, np.zeros_like(src)),
        "lut_apply_residual": lambda k: k.lut_apply_residual(residual, rgb, lidx, lw, np.empty_like(rgb)),
        "lut_scatter": lambda k: k.lut_scatter(grgb, lidx, lw, np.zeros_like(residual)),
    }


DECODE_SNIPPET = """
import json, time
import numpy as np
from hinet import BACKEND
from hinet.encoder import ModelConfig
from hinet.model import Model
from hinet.pipeline import harmonize
from hinet.training import make_synthetic_pair
s = make_synthetic_pair({size}, 0)
m = Model.create(ModelConfig.toy(), 0)
p = m.decoder_params(s.composite, s.mask)
harmonize(s.composite, s.mask, m, params=p)
t0 = time.perf_counter()
harmonize(s.composite, s.mask, m, params=p)
print(json.dumps({{"backend": BACKEND, "seconds": time.perf_counter() - t0}}))
"""


def decode_timing(size, disable_numba):
    env = dict(os.environ, HINET_DISABLE_NUMBA="1" if disable_numba else "0")
    out = subprocess.run([sys.executable, "-c", DECODE_SNIPPET.format(size=size)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--pixels", type=int, default=65536)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--decode-size", type=int, default=256, help="image side for the end-to-end decode (0 skips)")
    args = ap.parse_args(argv)

    if kernels.numba_impl is None:
        print("numba is unavailable (or HINET_DISABLE_NUMBA is set); nothing to compare", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    cases = kernel_cases(args.pixels, rng)
    print(f"{'kernel':<26}{'numpy [ms]':>12}{'numba [ms]':>12}{'speedup':>10}")
    for name, run in cases.items():
        run(kernels.numba_impl)  # compile
        t_np = best_of(lambda: run(kernels.numpy_impl), args.repeat)
        t_nb = best_of(lambda: run(kernels.numba_impl), args.repeat)
        print(f"{name:<26}{t_np * 1e3:>12.2f}{t_nb * 1e3:>12.2f}{t_np / t_nb:>10.1f}x")
    if args.decode_size:
        a = decode_timing(args.decode_size, disable_numba=True)
        b = decode_timing(args.decode_size, disable_numba=False)
        print(f"\nfull decode {args.decode_size}x{args.decode_size}: "
              f"numpy {a['seconds']:.3f}s, numba {b['seconds']:.3f}s ({a['seconds'] / b['seconds']:.1f}x)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
