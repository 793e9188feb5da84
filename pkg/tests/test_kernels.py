import numpy as np
import pytest

from fedfreeze import _kernels
from fedfreeze._kernels import _pykernels

compiled = _kernels.load_compiled()
needs_ext = pytest.mark.skipif(compiled is None, reason="compiled kernels not built")


def naive_im2col(x, kh, kw, s):
    n, h, w, c = x.shape
    oh, ow = (h - kh) // s + 1, (w - kw) // s + 1
    out = np.zeros((n, oh, ow, kh * kw * c), dtype=x.dtype)
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                out[b, i, j] = x[b, i * s:i * s + kh, j * s:j * s + kw, :].reshape(-1)
    return out


def naive_maxpool(x, p, s):
    n, h, w, c = x.shape
    oh, ow = (h - p) // s + 1, (w - p) // s + 1
    out = np.zeros((n, oh, ow, c), dtype=x.dtype)
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                out[b, i, j] = x[b, i * s:i * s + p, j * s:j * s + p, :].max(axis=(0, 1))
    return out


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("k,s", [(3, 1), (2, 2), (3, 2), (1, 1)])
def test_im2col_matches_loop_reference(rng, dtype, k, s):
    x = rng.normal(size=(2, 7, 6, 3)).astype(dtype)
    np.testing.assert_array_equal(_pykernels.im2col(x, k, k, s), naive_im2col(x, k, k, s))


@pytest.mark.parametrize("k,s", [(3, 1), (2, 2), (3, 2)])
def test_col2im_is_adjoint_of_im2col(rng, k, s):
    x = rng.normal(size=(2, 7, 6, 3))
    cols = _pykernels.im2col(x, k, k, s)
    g = rng.normal(size=cols.shape)
    lhs = np.sum(cols * g)
    rhs = np.sum(x * _pykernels.col2im(g, x.shape, k, k, s))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_maxpool_forward_and_routing(rng):
    x = rng.normal(size=(3, 6, 6, 2))
    out, arg = _pykernels.maxpool_forward(x, 2, 2)
    np.testing.assert_array_equal(out, naive_maxpool(x, 2, 2))
    dx = _pykernels.maxpool_backward(np.ones_like(out), arg, x.shape, 2, 2)
    # each window routes its gradient to exactly its maximum
    assert dx.sum() == out.size
    np.testing.assert_array_equal(x[dx == 1].size, out.size)


def test_maxpool_tie_goes_to_first_element():
    x = np.zeros((1, 2, 2, 1))
    out, arg = _pykernels.maxpool_forward(x, 2, 2)
    dx = _pykernels.maxpool_backward(np.ones_like(out), arg, x.shape, 2, 2)
    assert dx[0, 0, 0, 0] == 1 and dx.sum() == 1


def test_adam_kernel_matches_scalar_formula():
    p = np.array([1.0, -2.0, 0.5])
    g = np.array([0.1, -0.3, 0.0])
    m, v = np.zeros(3), np.zeros(3)
    _pykernels.adam_update(p, g, m, v, 0.01, 0.9, 0.999, 1e-7)
    exp_m = 0.1 * np.array([0.1, -0.3, 0.0])
    exp_v = 0.001 * np.array([0.1, -0.3, 0.0]) ** 2
    np.testing.assert_allclose(m, exp_m, rtol=1e-15)
    np.testing.assert_allclose(v, exp_v, rtol=1e-15)
    np.testing.assert_allclose(p, [1.0, -2.0, 0.5] - 0.01 * exp_m / (np.sqrt(exp_v) + 1e-7),
                               rtol=1e-15)


def test_backend_is_reported():
    assert _kernels.BACKEND in ("cython", "python")


@needs_ext
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("k,s", [(3, 1), (2, 2), (3, 2)])
def test_compiled_im2col_col2im_bit_identical(rng, dtype, k, s):
    x = rng.normal(size=(2, 9, 8, 4)).astype(dtype)
    a = _pykernels.im2col(x, k, k, s)
    b = compiled.im2col(x, k, k, s)
    assert a.dtype == b.dtype and a.tobytes() == np.asarray(b).tobytes()
    g = rng.normal(size=a.shape).astype(dtype)
    c = _pykernels.col2im(g, x.shape, k, k, s)
    d = compiled.col2im(g, x.shape, k, k, s)
    assert c.tobytes() == np.asarray(d).tobytes()


@needs_ext
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_compiled_maxpool_bit_identical(rng, dtype):
    x = rng.normal(size=(3, 8, 8, 5)).astype(dtype)
    x[0, :2, :2, 0] = 1.0  # a tie
    o1, a1 = _pykernels.maxpool_forward(x, 2, 2)
    o2, a2 = compiled.maxpool_forward(x, 2, 2)
    np.testing.assert_array_equal(o1, o2)
    np.testing.assert_array_equal(a1, a2)
    g = rng.normal(size=o1.shape).astype(dtype)
    d1 = _pykernels.maxpool_backward(g, a1, x.shape, 2, 2)
    d2 = compiled.maxpool_backward(g, a2, x.shape, 2, 2)
    assert d1.tobytes() == np.asarray(d2).tobytes()


@needs_ext
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_compiled_adam_bit_identical(rng, dtype):
    p1 = rng.normal(size=1000).astype(dtype)
    p2 = p1.copy()
    m1, v1 = np.zeros_like(p1), np.zeros_like(p1)
    m2, v2 = m1.copy(), v1.copy()
    for t in range(1, 6):
        g = rng.normal(size=1000).astype(dtype)
        lr_t = 0.01 * np.sqrt(1 - 0.999 ** t) / (1 - 0.9 ** t)
        _pykernels.adam_update(p1, g, m1, v1, lr_t, 0.9, 0.999, 1e-7)
        compiled.adam_update(p2, g, m2, v2, lr_t, 0.9, 0.999, 1e-7)
    assert p1.tobytes() == p2.tobytes()
    assert m1.tobytes() == m2.tobytes() and v1.tobytes() == v2.tobytes()


@needs_ext
def test_pure_python_switch_in_subprocess():
    import os
    import subprocess
    import sys
    env = dict(os.environ, FEDFREEZE_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import fedfreeze._kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
