"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operations the harmonization graph needs are provided.  Each op
computes its value eagerly and, unless gradients are disabled, records a
closure mapping the output gradient to parent gradients.  :func:`backward`
walks the recorded graph in reverse topological order.

Activation sign patterns are recorded on the active :class:`Tape` so that
finite-difference checks can detect when a perturbation crosses a kink.
"""

import contextlib
import contextvars

import numpy as np

from . import kernels, probe

_grad_enabled = contextvars.ContextVar("hinet_grad_enabled", default=True)
_tape = contextvars.ContextVar("hinet_tape", default=None)


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, name={self.name!r})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Collects graph values for memory accounting and activation signatures."""

    def __init__(self):
        self.signature = []
        self.tracked = []

    def note(self, arr):
        if probe.active() is not None and arr.size > probe.TRACK_THRESHOLD:
            probe.track(arr, "train/graph")
            self.tracked.append(arr)

    def release(self):
        probe.release(*self.tracked)
        self.tracked.clear()


@contextlib.contextmanager
def recording(tape=None):
    tape = Tape() if tape is None else tape
    token = _tape.set(tape)
    try:
        yield tape
    finally:
        _tape.reset(token)
        tape.release()


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def param(value, name=None):
    return Var(np.asarray(value, dtype=np.float64), requires_grad=True, name=name)


def const(value):
    return value if isinstance(value, Var) else Var(np.asarray(value, dtype=np.float64))


def _make(value, parents, backward_fn):
    tape = _tape.get()
    if tape is not None:
        tape.note(value)
    parents = tuple(parents)
    needs = _grad_enabled.get() and any(p.requires_grad for p in parents)
    if not needs:
        return Var(value)
    return Var(value, parents, backward_fn, requires_grad=True)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = const(a), const(b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = const(a), const(b)
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = const(a), const(b)
    return _make(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def leaky_relu(x, slope):
    pos = x.value > 0.0
    tape = _tape.get()
    if tape is not None:
        tape.signature.append(np.packbits(pos))
    d = np.where(pos, 1.0, slope)
    return _make(x.value * d, (x,), lambda g: (g * d,))


def square(x):
    return _make(x.value * x.value, (x,), lambda g: (2.0 * g * x.value,))


def relu_squared(x):
    """max(x, 0)**2, continuously differentiable."""
    pos = np.maximum(x.value, 0.0)
    return _make(pos * pos, (x,), lambda g: (2.0 * g * pos,))


# ------------------------------------------------------------- reductions

def sum_all(x):
    return _make(np.asarray(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x):
    n = x.value.size
    return _make(np.asarray(x.value.mean()), (x,), lambda g: (np.full(x.shape, g / n),))


def mean_axes(x, axes):
    axes = tuple(a % x.value.ndim for a in axes)
    n = int(np.prod([x.shape[a] for a in axes]))

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape) / n,)

    return _make(x.value.mean(axis=axes), (x,), bw)


# ------------------------------------------------------------------ shaping

def reshape(x, shape):
    return _make(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes):
    inv = np.argsort(axes)
    return _make(np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, key):
    def bw(g):
        out = np.zeros(x.shape)
        np.add.at(out, key, g) if _fancy(key) else out.__setitem__(key, g)
        return (out,)

    return _make(x.value[key], (x,), bw)


def _fancy(key):
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (np.ndarray, list)) for k in keys)


def concat(xs, axis):
    xs = [const(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(np.concatenate([x.value for x in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


# ------------------------------------------------------------------ linear

def matmul(a, b):
    a, b = const(a), const(b)

    def bw(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.value @ b.value, (a, b), bw)


def fmm(base, mod_a, mod_b):
    """Per-instance effective weights ``base * (mod_a @ mod_b)``; instances on axis 0."""
    ab = np.matmul(mod_a.value, mod_b.value)

    def bw(g):
        gab = g * base.value[None]
        return ((g * ab).sum(axis=0),
                gab @ np.swapaxes(mod_b.value, -1, -2),
                np.swapaxes(mod_a.value, -1, -2) @ gab)

    return _make(base.value[None] * ab, (base, mod_a, mod_b), bw)


def conv3x3_s2(x, w, b):
    """3x3 convolution, stride 2, zero padding 1; x (C, H, W), w (O, C, 3, 3)."""
    c, h, wd = x.shape
    o = w.shape[0]
    ho, wo = (h + 1) // 2, (wd + 1) // 2
    xp = np.zeros((c, h + 2, wd + 2))
    xp[:, 1:-1, 1:-1] = x.value
    cols = np.empty((c, 3, 3, ho, wo))
    for ky in range(3):
        for kx in range(3):
            cols[:, ky, kx] = xp[:, ky:ky + 2 * ho:2, kx:kx + 2 * wo:2]
    cols = cols.reshape(c * 9, ho * wo)
    wm = w.value.reshape(o, c * 9)
    out = (wm @ cols + b.value[:, None]).reshape(o, ho, wo)

    def bw(g):
        g2 = g.reshape(o, ho * wo)
        gw = (g2 @ cols.T).reshape(w.shape)
        gb = g2.sum(axis=1)
        gcols = (wm.T @ g2).reshape(c, 3, 3, ho, wo)
        gxp = np.zeros((c, h + 2, wd + 2))
        for ky in range(3):
            for kx in range(3):
                gxp[:, ky:ky + 2 * ho:2, kx:kx + 2 * wo:2] += gcols[:, ky, kx]
        return gxp[:, 1:-1, 1:-1], gw, gb

    return _make(out, (x, w, b), bw)


def separable_pool(x, ph, pw):
    """out[i, j, c] = sum_{h, w} ph[i, h] * x[c, h, w] * pw[j, w]."""
    t = np.tensordot(x.value, pw, axes=([2], [1]))       # (C, H, Gw)
    out = np.tensordot(ph, t, axes=([1], [1]))            # (Gh, C, Gw)
    out = np.transpose(out, (0, 2, 1))

    def bw(g):
        gt = np.tensordot(ph, np.transpose(g, (0, 2, 1)), axes=([0], [0]))  # (H, C, Gw)
        gx = np.tensordot(gt, pw, axes=([2], [0]))                          # (H, C, W)
        return (np.transpose(gx, (1, 0, 2)),)

    return _make(np.ascontiguousarray(out), (x,), bw)


# -------------------------------------------------------------- decoder ops

def routed_affine(x, cells, w, b, act, slope):
    """Per-row affine map through ``w[cells[p]]`` with optional leaky rectifier."""
    x, w, b = const(x), const(w), const(b)
    xv = np.ascontiguousarray(x.value)
    out = np.empty((xv.shape[0], w.shape[1]))
    kernels.routed_affine(xv, cells, w.value, b.value, act, slope, out)
    if act:
        pos = out > 0.0
        tape = _tape.get()
        if tape is not None:
            tape.signature.append(np.packbits(pos))

    def bw(g):
        if act:
            g = np.where(pos, g, g * slope)
        g = np.ascontiguousarray(g)
        gx = np.empty_like(xv)
        gw = np.zeros(w.shape)
        gb = np.zeros(b.shape)
        kernels.routed_affine_backward(xv, cells, w.value, g, gx, gw, gb)
        return gx, gw, gb

    return _make(out, (x, w, b), bw)


def gather_blend(src, index, weight):
    out = np.empty((index.shape[0], src.shape[1]))
    kernels.gather_blend(src.value, index, weight, out)

    def bw(g):
        gs = np.zeros(src.shape)
        kernels.gather_blend_backward(np.ascontiguousarray(g), index, weight, gs)
        return (gs,)

    return _make(out, (src,), bw)


def lut_apply(lattice, rgb, index, weight, identity):
    """``rgb + sum_k weight * (lattice - identity)[index]``; gradient w.r.t. the lattice."""
    d = lattice.shape[0]
    residual = (lattice.value - identity).reshape(-1, 3)
    out = np.empty_like(rgb)
    kernels.lut_apply_residual(residual, rgb, index, weight, out)

    def bw(g):
        gl = np.zeros((d ** 3, 3))
        kernels.lut_scatter(np.ascontiguousarray(g), index, weight, gl)
        return (gl.reshape(lattice.shape),)

    return _make(out, (lattice,), bw)


# ----------------------------------------------------------------- backward

def backward(root, seed=None):
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(root): np.ones(root.shape) if seed is None else np.asarray(seed, dtype=np.float64)}
    tape = _tape.get()
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if not p.requires_grad:
                continue
            if tape is not None:
                tape.note(pg)
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
