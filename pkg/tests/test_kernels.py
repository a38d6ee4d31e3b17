import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpgan import _pykernels, kernels

try:
    from cpgan import _ckernels
except ImportError:  # extension not built
    _ckernels = None

needs_ext = pytest.mark.skipif(_ckernels is None, reason="compiled extension not built")


def loop_im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = np.zeros((n, c * kh * kw, oh * ow), dtype=x.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for y in range(oh):
                        for z in range(ow):
                            cols[b, row, y * ow + z] = xp[b, ch, y * stride + i, z * stride + j]
    return cols, oh, ow


conv_shapes = st.tuples(st.integers(1, 2), st.integers(1, 3), st.integers(3, 7), st.integers(3, 7),
                        st.sampled_from([1, 3]), st.integers(1, 2), st.integers(0, 1))


@given(conv_shapes, st.sampled_from([np.float32, np.float64]))
@settings(max_examples=40, deadline=None)
def test_python_im2col_matches_loops(shape, dtype):
    n, c, h, w, k, stride, pad = shape
    x = np.random.default_rng(h * w).normal(size=(n, c, h, w)).astype(dtype)
    got, oh, ow = _pykernels.im2col(x, k, k, stride, pad)
    ref, roh, row = loop_im2col(x, k, k, stride, pad)
    assert (oh, ow) == (roh, row)
    np.testing.assert_array_equal(got, ref)


@given(conv_shapes)
@settings(max_examples=40, deadline=None)
def test_col2im_is_adjoint_of_im2col(shape):
    # <im2col(x), y> == <x, col2im(y)> for every backend
    n, c, h, w, k, stride, pad = shape
    rng = np.random.default_rng(n + c + h)
    x = rng.normal(size=(n, c, h, w))
    cols, oh, ow = kernels.im2col(x, k, k, stride, pad)
    y = rng.normal(size=cols.shape)
    back = kernels.col2im(y, x.shape, k, k, stride, pad)
    assert np.sum(cols * y) == pytest.approx(np.sum(x * back), rel=1e-10)


@needs_ext
@given(conv_shapes, st.sampled_from([np.float32, np.float64]))
@settings(max_examples=40, deadline=None)
def test_backends_agree(shape, dtype):
    n, c, h, w, k, stride, pad = shape
    rng = np.random.default_rng(7)
    x = rng.normal(size=(n, c, h, w)).astype(dtype)
    a, oh, ow = _ckernels.im2col(x, k, k, stride, pad)
    b, _, _ = _pykernels.im2col(x, k, k, stride, pad)
    np.testing.assert_array_equal(a, b)
    y = rng.normal(size=a.shape).astype(dtype)
    np.testing.assert_allclose(_ckernels.col2im(y, x.shape, k, k, stride, pad),
                               _pykernels.col2im(y, x.shape, k, k, stride, pad), rtol=1e-5, atol=1e-5)


@needs_ext
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_softmax_grad_backends_agree(dtype):
    rng = np.random.default_rng(3)
    y = _pykernels.softmax_lastaxis(rng.normal(size=(2, 5, 7)).astype(dtype))
    g = rng.normal(size=y.shape).astype(dtype)
    np.testing.assert_allclose(_ckernels.softmax_lastaxis_grad(y, g), _pykernels.softmax_lastaxis_grad(y, g),
                               rtol=1e-5, atol=1e-6)


def test_backend_selection_by_environment():
    code = "from cpgan import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, CPGAN_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
    env.pop("CPGAN_PURE_PYTHON")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == ("cython" if _ckernels is not None else "python")


def test_fallback_suite_passes_on_core_ops():
    """The tensor and gradient suites also pass with the pure-numpy backend."""
    env = dict(os.environ, CPGAN_PURE_PYTHON="1")
    here = os.path.dirname(__file__)
    res = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                          os.path.join(here, "test_tensor.py"), os.path.join(here, "test_gradcheck.py")],
                         env=env, capture_output=True, text=True)
    assert res.returncode == 0, res.stdout[-2000:]
