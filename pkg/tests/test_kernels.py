import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bubbleattack import _fallback, kernels

compiled = pytest.importorskip("bubbleattack._kernels")


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
@pytest.mark.parametrize("stride", [1, 2])
def test_im2col_col2im_parity(dtype, stride):
    x = np.random.default_rng(0).normal(size=(2, 3, 9, 8)).astype(dtype)
    a = compiled.im2col(x, 3, 3, stride)
    b = _fallback.im2col(x, 3, 3, stride)
    assert a.dtype == b.dtype and np.array_equal(a, b)
    assert np.array_equal(compiled.col2im(a, 9, 8, stride), _fallback.col2im(b, 9, 8, stride))


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 2, 7, 6))
    c = rng.normal(size=kernels.im2col(x, 3, 3, 2).shape)
    lhs = np.sum(kernels.im2col(x, 3, 3, 2) * c)
    rhs = np.sum(x * kernels.col2im(c, 7, 6, 2))
    assert lhs == pytest.approx(rhs, rel=1e-12)


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_maxpool_parity(dtype):
    x = np.random.default_rng(2).integers(0, 3, size=(2, 3, 6, 8)).astype(dtype)  # many ties
    pa, ia = compiled.maxpool2_forward(x)
    pb, ib = _fallback.maxpool2_forward(x)
    assert np.array_equal(pa, pb) and np.array_equal(ia, ib)
    g = np.random.default_rng(3).normal(size=pa.shape).astype(dtype)
    assert np.array_equal(compiled.maxpool2_backward(g, ia), _fallback.maxpool2_backward(g, ib))


@settings(max_examples=200)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=1, max_size=64))
def test_round_reduced_parity(vals):
    x = np.array(vals)
    assert np.array_equal(compiled.round_reduced(x), _fallback.round_reduced(x))


def test_round_reduced_parity_subnormal_and_overflow():
    x = np.array([2.0 ** -137, 3 * 2.0 ** -138, 2.0 ** -140, 3.4e38, -3.4e38, 2.0 ** -126, 0.0, -0.0])
    assert np.array_equal(compiled.round_reduced(x), _fallback.round_reduced(x))


def test_error_diffusion_parity_across_strips():
    dark = np.random.default_rng(4).uniform(size=(48, 60))
    a1, ca = compiled.error_diffusion(dark[:24], None, 0)
    a2, _ = compiled.error_diffusion(dark[24:], ca, 24)
    b1, cb = _fallback.error_diffusion(dark[:24], None, 0)
    b2, _ = _fallback.error_diffusion(dark[24:], cb, 24)
    assert np.array_equal(a1, b1) and np.array_equal(a2, b2)
    whole, _ = _fallback.error_diffusion(dark, None, 0)
    assert np.array_equal(np.vstack([b1, b2]), whole)


def test_error_diffusion_preserves_mean():
    dark = np.full((120, 120), 0.3)
    ink, _ = kernels.error_diffusion(dark, None, 0)
    assert abs(ink.mean() - 0.3) < 0.01


def test_box_downsample_parity():
    r = (np.random.default_rng(5).uniform(size=(36, 42)) < 0.4).astype(np.uint8)
    assert np.array_equal(compiled.box_downsample(r, 6), _fallback.box_downsample(r, 6))


def test_pure_python_fallback_selected_by_env():
    env = {**os.environ, "BUBBLEATTACK_PURE": "1"}
    out = subprocess.run([sys.executable, "-c", "import bubbleattack; print(bubbleattack.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
    assert kernels.BACKEND == "cython"
