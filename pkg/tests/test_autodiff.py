import numpy as np
import pytest

from hinet import autodiff as ad
from hinet.lut import corner_weights, identity_lattice


def numeric_grad(fn, arrays, k, eps=1e-6):
    base = [a.copy() for a in arrays]
    g = np.zeros_like(base[k])
    it = np.nditer(base[k], flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        plus = [a.copy() for a in base]
        minus = [a.copy() for a in base]
        plus[k][i] += eps
        minus[k][i] -= eps
        g[i] = (fn(*[ad.const(a) for a in plus]).value - fn(*[ad.const(a) for a in minus]).value) / (2 * eps)
    return g


def check(fn, arrays, tol=1e-6):
    """Compare reverse-mode gradients of the scalar ``fn`` with central differences."""
    params = [ad.param(a) for a in arrays]
    ad.backward(fn(*params))
    for k, p in enumerate(params):
        num = numeric_grad(fn, arrays, k)
        scale = max(1.0, np.abs(num).max())
        assert np.abs(p.grad - num).max() <= tol * scale, f"argument {k}"


def scalarize(out, seed=0):
    r = np.random.default_rng(seed).normal(size=out.shape)
    return ad.sum_all(ad.mul(out, r))


def test_zero_seed_gives_zero_grads():
    rng = np.random.default_rng(0)
    w = ad.param(rng.normal(size=(4, 3)))
    x = ad.const(rng.normal(size=(5, 4)))
    out = ad.leaky_relu(ad.matmul(x, w), 0.2)
    ad.backward(out, seed=np.zeros(out.shape))
    assert np.array_equal(w.grad, np.zeros((4, 3)))


def test_linear_least_squares_closed_form():
    rng = np.random.default_rng(1)
    n = 40
    X, Y, W = rng.normal(size=(n, 5)), rng.normal(size=(n, 2)), rng.normal(size=(5, 2))
    w = ad.param(W)
    r = ad.sub(ad.matmul(ad.const(X), w), ad.const(Y))
    # L = sum over rows of the squared residual norm, divided by n
    loss = ad.mul(ad.sum_all(ad.square(r)), 1.0 / n)
    ad.backward(loss)
    np.testing.assert_allclose(w.grad, 2 * X.T @ (X @ W - Y) / n, rtol=0, atol=1e-10)


def test_leaky_relu_subgradient_at_zero_is_slope():
    x = ad.param(np.array([-1.0, 0.0, 2.0]))
    ad.backward(ad.sum_all(ad.leaky_relu(x, 0.2)))
    assert list(x.grad) == [0.2, 0.2, 1.0]


def test_gradient_accumulates_over_reuse():
    x = ad.param(np.array([3.0]))
    ad.backward(ad.sum_all(ad.add(ad.mul(x, x), x)))
    assert x.grad[0] == 7.0


def test_no_grad_records_nothing():
    x = ad.param(np.ones(3))
    with ad.no_grad():
        y = ad.mul(x, 2.0)
    assert not y.requires_grad and y.parents == ()


def test_tape_signature_records_activations():
    with ad.recording() as tape:
        ad.leaky_relu(ad.const(np.array([-1.0, 1.0])), 0.2)
    assert len(tape.signature) == 1


@pytest.mark.parametrize("name", ["elementwise", "reductions", "shaping", "matmul", "fmm", "conv", "pool"])
def test_ops_match_finite_differences(name):
    rng = np.random.default_rng(2)
    if name == "elementwise":
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(1, 4))
        check(lambda a, b: scalarize(ad.relu_squared(ad.sub(ad.mul(a, b), ad.add(a, 0.3)))), [a, b])
    elif name == "reductions":
        a = rng.normal(size=(3, 4, 5))
        check(lambda a: ad.add(scalarize(ad.mean_axes(a, (1, 2))), ad.mean(ad.square(a))), [a])
    elif name == "shaping":
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 2))
        idx = np.array([0, 2, 2])
        check(lambda a, b: scalarize(ad.getitem(ad.transpose(ad.reshape(ad.concat([a, b], axis=2), (6, 6)),
                                                             (1, 0)), (slice(None), idx))), [a, b])
    elif name == "matmul":
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
        check(lambda a, b: scalarize(ad.matmul(a, b)), [a, b])
    elif name == "fmm":
        base, ma, mb = rng.normal(size=(3, 4)), rng.normal(size=(5, 3, 2)), rng.normal(size=(5, 2, 4))
        check(lambda base, ma, mb: scalarize(ad.fmm(base, ma, mb)), [base, ma, mb])
    elif name == "conv":
        x, w, b = rng.normal(size=(2, 5, 6)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        check(lambda x, w, b: scalarize(ad.conv3x3_s2(x, w, b)), [x, w, b])
    elif name == "pool":
        x = rng.normal(size=(2, 6, 5))
        ph, pw = rng.random((3, 6)), rng.random((2, 5))
        check(lambda x: scalarize(ad.separable_pool(x, ph, pw)), [x])


def test_routed_affine_matches_finite_differences():
    rng = np.random.default_rng(3)
    x, w, b = rng.normal(size=(12, 4)), rng.normal(size=(3, 5, 4)), rng.normal(size=(3, 5))
    cells = rng.integers(0, 3, 12).astype(np.int64)
    for act in (False, True):
        check(lambda x, w, b: scalarize(ad.routed_affine(x, cells, w, b, act, 0.2)), [x, w, b])


def test_gather_blend_and_lut_apply_match_finite_differences():
    rng = np.random.default_rng(4)
    src = rng.normal(size=(6, 3))
    index = rng.integers(0, 6, (10, 4)).astype(np.int64)
    weight = rng.random((10, 4))
    check(lambda s: scalarize(ad.gather_blend(s, index, weight)), [src])
    rgb = rng.random((20, 3))
    cidx, cw = corner_weights(rgb, 3)
    lat = identity_lattice(3) + 0.1 * rng.normal(size=(3, 3, 3, 3))
    check(lambda lat: scalarize(ad.lut_apply(lat, rgb, cidx, cw, identity_lattice(3))), [lat])
