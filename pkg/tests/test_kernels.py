import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splitguard import _kernels_py, kernels

compiled = pytest.importorskip("splitguard._kernels")


def brute_im2col(x, kh, kw, sh, sw):
    n, c, h, w = x.shape
    ho, wo = (h - kh) // sh + 1, (w - kw) // sw + 1
    out = np.zeros((n, c * kh * kw, ho * wo), x.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    for oy in range(ho):
                        for ox in range(wo):
                            out[b, (ch * kh + i) * kw + j, oy * wo + ox] = x[b, ch, oy * sh + i, ox * sw + j]
    return out


geometry = st.tuples(
    st.integers(1, 3), st.integers(1, 4), st.integers(1, 9), st.integers(1, 9),
    st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3),
).filter(lambda g: g[4] <= g[2] and g[5] <= g[3])


@given(geometry, st.sampled_from([np.float32, np.float64]), st.integers(0, 2**16))
@settings(max_examples=150, deadline=None)
def test_backends_agree_bit_for_bit(geo, dtype, seed):
    n, c, h, w, kh, kw, sh, sw = geo
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, c, h, w)).astype(dtype)
    a = compiled.im2col(x, kh, kw, sh, sw)
    b = _kernels_py.im2col(x, kh, kw, sh, sw)
    assert a.dtype == b.dtype == dtype and np.array_equal(a, b)
    cols = r.standard_normal(a.shape).astype(dtype)
    ca = compiled.col2im(cols, c, h, w, kh, kw, sh, sw)
    cb = _kernels_py.col2im(cols, c, h, w, kh, kw, sh, sw)
    # accumulation order differs between the two, so allow rounding only
    np.testing.assert_allclose(ca, cb, rtol=1e-5 if dtype == np.float32 else 1e-12, atol=1e-6)


def test_im2col_matches_loops(rng):
    x = rng.standard_normal((2, 3, 7, 6)).astype(np.float32)
    np.testing.assert_array_equal(kernels.im2col(x, 3, 2, 2, 1), brute_im2col(x, 3, 2, 2, 1))


@pytest.mark.parametrize("impl", [compiled, _kernels_py])
def test_col2im_is_adjoint(impl, rng):
    x = rng.standard_normal((2, 2, 8, 7))
    cols = impl.im2col(x, 3, 3, 2, 2)
    y = rng.standard_normal(cols.shape)
    lhs = float(np.sum(cols * y))
    rhs = float(np.sum(x * impl.col2im(y, 2, 8, 7, 3, 3, 2, 2)))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_non_contiguous_input_is_handled(rng):
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)[:, :, ::-1, :]
    np.testing.assert_array_equal(compiled.im2col(x, 2, 2, 1, 1), _kernels_py.im2col(x, 2, 2, 1, 1))


@pytest.mark.parametrize("flag,expect", [("1", "numpy"), ("0", "cython")])
def test_backend_selection_by_environment(flag, expect):
    env = dict(os.environ, SPLITGUARD_PURE=flag)
    out = subprocess.run([sys.executable, "-c", "import splitguard; print(splitguard.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expect
