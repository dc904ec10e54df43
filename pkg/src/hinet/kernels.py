"""Hot per-pixel kernels with a numba path and a pure-numpy fallback.

Every public kernel writes into caller-allocated output arrays so that all
large buffers are owned (and accounted for) by the caller.  Forward kernels
carry no cross-pixel reductions, so a pixel's result never depends on which
other pixels share the batch.  Gradient scatters run serially to keep
training bit-reproducible.

Both implementations are importable explicitly (``numpy_impl`` /
``numba_impl``); the module-level names point at the active backend.
"""

import types

import numpy as np

from ._backend import HAVE_NUMBA, BACKEND

__all__ = [
    "BACKEND",
    "routed_affine",
    "routed_affine_backward",
    "gather_blend",
    "gather_blend_backward",
    "lut_apply_residual",
    "lut_scatter",
]


# ---------------------------------------------------------------- numpy path

def _groups(cell):
    order = np.argsort(cell, kind="stable")
    sorted_cells = cell[order]
    bounds = np.flatnonzero(np.diff(sorted_cells)) + 1
    starts = np.concatenate(([0], bounds))
    stops = np.concatenate((bounds, [len(cell)]))
    for s, e in zip(starts, stops):
        if e > s:
            yield int(sorted_cells[s]), order[s:e]


def _np_routed_affine(x, cell, w, b, act, slope, out):
    for c, sel in _groups(cell):
        # one (1 x in) @ (in x out) product per pixel: results do not depend
        # on how many pixels share the cell
        y = np.matmul(x[sel][:, None, :], w[c].T)[:, 0, :] + b[c]
        if act:
            y = np.where(y > 0.0, y, y * slope)
        out[sel] = y
    return out


def _np_routed_affine_backward(x, cell, w, gy, gx, gw, gb):
    gx[...] = 0.0
    for c, sel in _groups(cell):
        g = gy[sel]
        gx[sel] = g @ w[c]
        gw[c] += g.T @ x[sel]
        gb[c] += g.sum(axis=0)
    return gx


def _np_gather_blend(src, index, weight, out):
    out[...] = 0.0
    for k in range(index.shape[1]):
        out += weight[:, k:k + 1] * src[index[:, k]]
    return out


def _np_gather_blend_backward(gy, index, weight, gsrc):
    for k in range(index.shape[1]):
        np.add.at(gsrc, index[:, k], weight[:, k:k + 1] * gy)
    return gsrc


def _np_lut_apply_residual(residual, rgb, index, weight, out):
    out[...] = rgb
    for k in range(index.shape[1]):
        out += weight[:, k:k + 1] * residual[index[:, k]]
    return out


def _np_lut_scatter(gy, index, weight, glat):
    for k in range(index.shape[1]):
        np.add.at(glat, index[:, k], weight[:, k:k + 1] * gy)
    return glat


numpy_impl = types.SimpleNamespace(
    routed_affine=_np_routed_affine,
    routed_affine_backward=_np_routed_affine_backward,
    gather_blend=_np_gather_blend,
    gather_blend_backward=_np_gather_blend_backward,
    lut_apply_residual=_np_lut_apply_residual,
    lut_scatter=_np_lut_scatter,
)


# ---------------------------------------------------------------- numba path

numba_impl = None

if HAVE_NUMBA:
    from numba import njit, prange

    @njit(parallel=True, cache=True)
    def _nb_routed_affine_t(x, cell, wt, b, act, slope, out):
        # wt is (cells, in, out): the inner loop runs over independent outputs
        # so it vectorises while each output keeps a fixed summation order
        n, din = x.shape
        dout = wt.shape[2]
        for p in prange(n):
            c = cell[p]
            for o in range(dout):
                out[p, o] = 0.0
            for i in range(din):
                xi = x[p, i]
                for o in range(dout):
                    out[p, o] += wt[c, i, o] * xi
            for o in range(dout):
                acc = out[p, o] + b[c, o]
                if act and not acc > 0.0:
                    acc *= slope
                out[p, o] = acc
        return out

    def _nb_routed_affine(x, cell, w, b, act, slope, out):
        wt = np.ascontiguousarray(np.transpose(w, (0, 2, 1)))
        return _nb_routed_affine_t(x, cell, wt, b, act, slope, out)

    @njit(parallel=True, cache=True)
    def _nb_gather_blend(src, index, weight, out):
        n = index.shape[0]
        m = src.shape[1]
        for p in prange(n):
            for j in range(m):
                acc = 0.0
                for k in range(index.shape[1]):
                    acc += weight[p, k] * src[index[p, k], j]
                out[p, j] = acc
        return out

    @njit(cache=True)
    def _nb_gather_blend_backward(gy, index, weight, gsrc):
        n = index.shape[0]
        m = gy.shape[1]
        for p in range(n):
            for k in range(index.shape[1]):
                wk = weight[p, k]
                r = index[p, k]
                for j in range(m):
                    gsrc[r, j] += wk * gy[p, j]
        return gsrc

    @njit(parallel=True, cache=True)
    def _nb_lut_apply_residual(residual, rgb, index, weight, out):
        n = rgb.shape[0]
        for p in prange(n):
            for ch in range(3):
                acc = rgb[p, ch]
                for k in range(index.shape[1]):
                    acc += weight[p, k] * residual[index[p, k], ch]
                out[p, ch] = acc
        return out

    numba_impl = types.SimpleNamespace(
        routed_affine=_nb_routed_affine,
        # per-cell GEMMs through BLAS beat compiled scalar loops here
        routed_affine_backward=_np_routed_affine_backward,
        gather_blend=_nb_gather_blend,
        gather_blend_backward=_nb_gather_blend_backward,
        lut_apply_residual=_nb_lut_apply_residual,
        lut_scatter=_nb_gather_blend_backward,
    )

_active = numba_impl if HAVE_NUMBA else numpy_impl


def routed_affine(x, cell, w, b, act, slope, out):
    """out[p] = act(w[cell[p]] @ x[p] + b[cell[p]]) with a leaky rectifier."""
    return _active.routed_affine(x, cell, w, b, bool(act), float(slope), out)


def routed_affine_backward(x, cell, w, gy, gx, gw, gb):
    """Input gradient into ``gx``; weight/bias gradients accumulated in ``gw``/``gb``.

    ``gy`` must already include the activation derivative.
    """
    return _active.routed_affine_backward(x, cell, w, gy, gx, gw, gb)


def gather_blend(src, index, weight, out):
    """out[p] = sum_k weight[p, k] * src[index[p, k]]."""
    return _active.gather_blend(src, index, weight, out)


def gather_blend_backward(gy, index, weight, gsrc):
    return _active.gather_blend_backward(gy, index, weight, gsrc)


def lut_apply_residual(residual, rgb, index, weight, out):
    """out[p] = rgb[p] + sum_k weight[p, k] * residual[index[p, k]]."""
    return _active.lut_apply_residual(residual, rgb, index, weight, out)


def lut_scatter(gy, index, weight, glat):
    return _active.lut_scatter(gy, index, weight, glat)
