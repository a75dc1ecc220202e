"""Convolution kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy
implementation is used. Set ``PXRAY_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("PXRAY_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        pass


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def conv_forward(xp, w, stride):
    """Cross-correlate a padded batch ``xp[N,Hp,Wp,Ci]`` with ``w[kh,kw,Ci,Co]``."""
    return _impl.conv_forward(_c(xp), _c(w), int(stride))


def conv_backward_input(gy, w, stride, hp, wp):
    """Adjoint of :func:`conv_forward` with respect to the padded input."""
    return _impl.conv_backward_input(_c(gy), _c(w), int(stride), int(hp), int(wp))


def conv_backward_weights(xp, gy, stride, kh, kw):
    return _impl.conv_backward_weights(_c(xp), _c(gy), int(stride), int(kh), int(kw))
