import os
import subprocess
import sys

import numpy as np
import pytest

from pxray import _kernels_py, kernels

try:
    from pxray import _ckernels
except ImportError:  # extension not built
    _ckernels = None

needs_ext = pytest.mark.skipif(_ckernels is None, reason="compiled extension not built")

CASES = [(1, 6, 6, 1, 3, 3, 2, 1), (2, 9, 7, 3, 5, 5, 4, 2), (3, 8, 8, 2, 1, 1, 3, 1), (1, 32, 32, 1, 5, 5, 8, 2)]


def _data(rng, n, hp, wp, ci, kh, kw, co, stride):
    xp = rng.normal(size=(n, hp, wp, ci))
    w = rng.normal(size=(kh, kw, ci, co))
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    return xp, w, rng.normal(size=(n, ho, wo, co))


def test_python_backend_adjoint_identity(rng):
    # <conv(x), g> == <x, conv_T(g)> and == <w, dW(x, g)>
    for case in CASES:
        xp, w, gy = _data(rng, *case)
        stride = case[-1]
        y = _kernels_py.conv_forward(xp, w, stride)
        gx = _kernels_py.conv_backward_input(gy, w, stride, xp.shape[1], xp.shape[2])
        gw = _kernels_py.conv_backward_weights(xp, gy, stride, w.shape[0], w.shape[1])
        lhs = np.sum(y * gy)
        assert np.sum(xp * gx) == pytest.approx(lhs, rel=1e-12)
        assert np.sum(w * gw) == pytest.approx(lhs, rel=1e-12)


@needs_ext
@pytest.mark.parametrize("case", CASES)
def test_backends_agree(rng, case):
    xp, w, gy = _data(rng, *case)
    stride = case[-1]
    np.testing.assert_allclose(_ckernels.conv_forward(xp, w, stride), _kernels_py.conv_forward(xp, w, stride),
                               rtol=0, atol=1e-12)
    hp, wp = xp.shape[1:3]
    np.testing.assert_allclose(_ckernels.conv_backward_input(gy, w, stride, hp, wp),
                               _kernels_py.conv_backward_input(gy, w, stride, hp, wp), rtol=0, atol=1e-12)
    np.testing.assert_allclose(_ckernels.conv_backward_weights(xp, gy, stride, *w.shape[:2]),
                               _kernels_py.conv_backward_weights(xp, gy, stride, *w.shape[:2]), rtol=0, atol=1e-11)


def test_wrapper_accepts_non_contiguous(rng):
    xp = rng.normal(size=(1, 6, 6, 2)).transpose(0, 2, 1, 3)
    w = rng.normal(size=(3, 3, 2, 2))
    np.testing.assert_allclose(kernels.conv_forward(xp, w, 1),
                               _kernels_py.conv_forward(np.ascontiguousarray(xp), w, 1), rtol=0, atol=1e-12)


@needs_ext
def test_extension_selected_by_default():
    assert kernels.BACKEND == "cython"


def test_pure_python_switch():
    env = dict(os.environ, PXRAY_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from pxray import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
