"""Backend-agreement and adjoint checks for the hot kernels.

The numba and numpy implementations must agree to float rounding, and
every backward kernel must be the exact adjoint of its forward (checked
with the <Ax, y> == <x, A^T y> identity and brute-force oracles).
"""

import numpy as np
import pytest

from statflow.kernels import (_numba_impl, _numpy_impl, interp_matrix,
                              resize_bilinear, resize_bilinear_adjoint)

BACKENDS = [_numpy_impl, _numba_impl]
RNG = np.random.default_rng(1234)


def conv2d_bruteforce(x, w, b):
    """Direct quintuple-loop convolution; the oracle both backends match."""
    bb, ci, h, ww = x.shape
    co, _, k, _ = w.shape
    p = k // 2
    out = np.zeros((bb, co, h, ww), dtype=np.float64)
    for bi in range(bb):
        for o in range(co):
            for i in range(h):
                for j in range(ww):
                    acc = float(b[o])
                    for c in range(ci):
                        for ki in range(k):
                            for kj in range(k):
                                ii, jj = i + ki - p, j + kj - p
                                if 0 <= ii < h and 0 <= jj < ww:
                                    acc += float(x[bi, c, ii, jj]) * float(w[o, c, ki, kj])
                    out[bi, o, i, j] = acc
    return out


@pytest.mark.parametrize("impl", BACKENDS, ids=["numpy", "numba"])
def test_conv2d_matches_bruteforce(impl):
    x = RNG.normal(size=(2, 3, 6, 6))
    w = RNG.normal(size=(4, 3, 3, 3))
    b = RNG.normal(size=4)
    got = impl.conv2d(x, w, b)
    np.testing.assert_allclose(got, conv2d_bruteforce(x, w, b), rtol=1e-12)


def test_backends_agree_float32():
    x = RNG.normal(size=(3, 8, 16, 16)).astype(np.float32)
    w = RNG.normal(size=(16, 8, 3, 3)).astype(np.float32)
    b = RNG.normal(size=16).astype(np.float32)
    ya = _numpy_impl.conv2d(x, w, b)
    yb = _numba_impl.conv2d(x, w, b)
    np.testing.assert_allclose(ya, yb, rtol=2e-6, atol=2e-6)
    ga = _numpy_impl.conv2d_input_grad(ya, w)
    gb = _numba_impl.conv2d_input_grad(yb, w)
    np.testing.assert_allclose(ga, gb, rtol=2e-5, atol=2e-5)
    dwa, dba = _numpy_impl.conv2d_weight_grad(x, ya, 3)
    dwb, dbb = _numba_impl.conv2d_weight_grad(x, yb, 3)
    np.testing.assert_allclose(dwa, dwb, rtol=2e-4, atol=2e-4)
    np.testing.assert_allclose(dba, dbb, rtol=2e-4, atol=2e-4)
    # float32 summation order differs between the backends' pools
    np.testing.assert_allclose(_numpy_impl.avgpool2(x), _numba_impl.avgpool2(x),
                               rtol=1e-5, atol=1e-6)


@pytest.mark.parametrize("impl", BACKENDS, ids=["numpy", "numba"])
def test_conv2d_input_grad_is_adjoint(impl):
    x = RNG.normal(size=(2, 3, 5, 5))
    w = RNG.normal(size=(4, 3, 3, 3))
    y = impl.conv2d(x, w, np.zeros(4))
    gy = RNG.normal(size=y.shape)
    gx = impl.conv2d_input_grad(gy, w)
    # <conv(x), gy> == <x, adjoint(gy)> for the bias-free linear part
    np.testing.assert_allclose((y * gy).sum(), (x * gx).sum(), rtol=1e-10)


@pytest.mark.parametrize("impl", BACKENDS, ids=["numpy", "numba"])
def test_conv2d_weight_grad_matches_fd(impl):
    x = RNG.normal(size=(2, 2, 4, 4))
    w = RNG.normal(size=(3, 2, 3, 3))
    b = RNG.normal(size=3)
    gy = RNG.normal(size=(2, 3, 4, 4))
    dw, db = impl.conv2d_weight_grad(x, gy, 3)
    h = 1e-6
    for idx in [(0, 0, 0, 0), (1, 1, 2, 1), (2, 0, 1, 2)]:
        wp, wm = w.copy(), w.copy()
        wp[idx] += h
        wm[idx] -= h
        fd = ((impl.conv2d(x, wp, b) - impl.conv2d(x, wm, b)) * gy).sum() / (2 * h)
        assert abs(fd - dw[idx]) < 1e-6 * max(1.0, abs(fd))
    fdb = ((impl.conv2d(x, w, b + np.array([h, 0, 0])) -
            impl.conv2d(x, w, b - np.array([h, 0, 0]))) * gy).sum() / (2 * h)
    assert abs(fdb - db[0]) < 1e-6 * max(1.0, abs(fdb))


@pytest.mark.parametrize("impl", BACKENDS, ids=["numpy", "numba"])
def test_avgpool2_roundtrip_and_adjoint(impl):
    x = RNG.normal(size=(2, 3, 8, 8))
    y = impl.avgpool2(x)
    assert y.shape == (2, 3, 4, 4)
    np.testing.assert_allclose(y[0, 0, 0, 0], x[0, 0, :2, :2].mean(), rtol=1e-12)
    gy = RNG.normal(size=y.shape)
    gx = impl.avgpool2_backward(gy)
    np.testing.assert_allclose((y * gy).sum(), (x * gx).sum(), rtol=1e-10)
    with pytest.raises(ValueError):
        impl.avgpool2(RNG.normal(size=(1, 1, 5, 5)))


def test_interp_matrix_rows_sum_to_one():
    for src, dst in [(8, 32), (32, 8), (7, 13), (4, 4)]:
        a = interp_matrix(src, dst)
        np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)


def test_resize_identity_and_constant():
    x = RNG.normal(size=(3, 8, 8))
    np.testing.assert_allclose(resize_bilinear(x, 8), x)
    const = np.full((1, 4, 4), 2.5)
    np.testing.assert_allclose(resize_bilinear(const, 16), 2.5, atol=1e-12)


def test_resize_adjoint_identity():
    x = RNG.normal(size=(3, 8, 8))
    y = resize_bilinear(x, 32)
    gy = RNG.normal(size=y.shape)
    gx = resize_bilinear_adjoint(gy, 8)
    np.testing.assert_allclose((y * gy).sum(), (x * gx).sum(), rtol=1e-10)
