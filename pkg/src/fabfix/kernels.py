"""Hot-kernel dispatch.

The compiled extension ``fabfix._ckernels`` is used when it imports;
otherwise, or when ``FABFIX_KERNELS=python`` is set, the numpy fallback in
``fabfix._pykernels`` is used. ``BACKEND`` names the active choice.
"""

import os

import numpy as np

from . import _pykernels

_forced = os.environ.get("FABFIX_KERNELS", "").strip().lower()

_ckernels = None
if _forced != "python":
    try:
        from . import _ckernels
    except ImportError:
        if _forced == "cython":
            raise
        _ckernels = None

BACKEND = "cython" if _ckernels is not None else "python"
_impl = _ckernels if _ckernels is not None else _pykernels


def available_backends():
    return ["cython", "python"] if _ckernels is not None else ["python"]


def get_backend(name):
    """Module implementing the kernels for ``name`` ('cython' or 'python')."""
    if name == "python":
        return _pykernels
    if name == "cython":
        if _ckernels is None:
            raise ImportError("compiled kernels are not built")
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def _c(a):
    return np.ascontiguousarray(a)


def conv3x3_forward(x, kernel, bias):
    return _impl.conv3x3_forward(_c(x), _c(kernel), _c(bias))


def conv3x3_backward(x, kernel, grad_out, need_input_grad=True):
    return _impl.conv3x3_backward(_c(x), _c(kernel), _c(grad_out), need_input_grad)


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, bc1, bc2):
    """In-place Adam update; all arrays must be contiguous and same dtype."""
    if _impl is _ckernels:
        _ckernels.adam_update(param.reshape(-1), _c(grad).reshape(-1),
                              m.reshape(-1), v.reshape(-1),
                              lr, beta1, beta2, eps, bc1, bc2)
    else:
        _pykernels.adam_update(param, grad, m, v, lr, beta1, beta2, eps, bc1, bc2)


def avgpool2_forward(x):
    return _impl.avgpool2_forward(_c(x))


def avgpool2_backward(grad):
    return _impl.avgpool2_backward(_c(grad))
