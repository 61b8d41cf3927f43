import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynsubnet import _kernels_py, kernels

compiled = pytest.importorskip("dynsubnet._kernels")


def reference_im2col(x, k, stride, pad):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
    out = np.zeros((n, ho, wo, c, k, k), x.dtype)
    for i in range(ho):
        for j in range(wo):
            out[:, i, j] = xp[:, :, i * stride:i * stride + k, j * stride:j * stride + k]
    return out.reshape(n * ho * wo, c * k * k)


shapes = st.tuples(
    st.integers(1, 3), st.integers(0, 4), st.integers(1, 7), st.integers(1, 7),
    st.integers(1, 3), st.integers(1, 3), st.integers(0, 2),
).filter(lambda t: t[2] + 2 * t[6] >= t[4] and t[3] + 2 * t[6] >= t[4])


class TestIm2col:
    @settings(max_examples=60, deadline=None)
    @given(shapes, st.sampled_from([np.float32, np.float64]))
    def test_backends_match_reference(self, shape, dtype):
        n, c, h, w, k, s, p = shape
        x = np.random.default_rng(0).standard_normal((n, c, h, w)).astype(dtype)
        ref = reference_im2col(x, k, s, p)
        np.testing.assert_array_equal(_kernels_py.im2col(x, k, s, p), ref)
        np.testing.assert_array_equal(np.asarray(compiled.im2col(x, k, s, p)), ref)

    @settings(max_examples=60, deadline=None)
    @given(shapes, st.sampled_from([np.float32, np.float64]))
    def test_col2im_is_adjoint(self, shape, dtype):
        # <im2col(x), c> == <x, col2im(c)> for any x, c
        n, c, h, w, k, s, p = shape
        rng = np.random.default_rng(1)
        x = rng.standard_normal((n, c, h, w))
        cols_shape = reference_im2col(x, k, s, p).shape
        cols = rng.standard_normal(cols_shape).astype(dtype)
        lhs = float((reference_im2col(x, k, s, p) * cols).sum())
        for mod in (_kernels_py, compiled):
            back = np.asarray(mod.col2im(cols, n, c, h, w, k, s, p))
            assert back.dtype == dtype
            assert float((x * back).sum()) == pytest.approx(lhs, rel=1e-4, abs=1e-4)

    def test_backends_agree_on_col2im(self):
        rng = np.random.default_rng(2)
        cols = rng.standard_normal((2 * 4 * 4, 3 * 9))
        a = _kernels_py.col2im(cols, 2, 3, 4, 4, 3, 1, 1)
        b = np.asarray(compiled.col2im(cols, 2, 3, 4, 4, 3, 1, 1))
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


class TestBackendSelection:
    def test_compiled_is_default(self):
        env = {k: v for k, v in os.environ.items() if k != "DYNSUBNET_PURE_PYTHON"}
        out = subprocess.run([sys.executable, "-c", "import dynsubnet.kernels as k; print(k.BACKEND)"],
                             env=env, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == "cython"

    def test_env_forces_fallback(self):
        env = dict(os.environ, DYNSUBNET_PURE_PYTHON="1")
        out = subprocess.run([sys.executable, "-c", "import dynsubnet.kernels as k; print(k.BACKEND)"],
                             env=env, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == "python"
