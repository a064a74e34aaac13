# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot kernels in ``_pykernels``.

Same signatures and semantics; results agree with the numpy path to
rounding (summation order differs). The convolution loops live in
``conv_core.h``.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport sqrt, sqrtf

cnp.import_array()

cdef extern from "conv_core.h" nogil:
    int FABFIX_MAX_K
    void conv3x3_fwd_f32(const float *x, Py_ssize_t n, Py_ssize_t h, Py_ssize_t w,
                         Py_ssize_t cin, const float *kmat, const float *bias,
                         Py_ssize_t cout, float *out)
    void conv3x3_fwd_f64(const double *x, Py_ssize_t n, Py_ssize_t h, Py_ssize_t w,
                         Py_ssize_t cin, const double *kmat, const double *bias,
                         Py_ssize_t cout, double *out)
    void conv3x3_bwd_kernel_f32(const float *x, Py_ssize_t n, Py_ssize_t h,
                                Py_ssize_t w, Py_ssize_t cin, const float *g,
                                Py_ssize_t cout, float *grad_k, float *grad_b)
    void conv3x3_bwd_kernel_f64(const double *x, Py_ssize_t n, Py_ssize_t h,
                                Py_ssize_t w, Py_ssize_t cin, const double *g,
                                Py_ssize_t cout, double *grad_k, double *grad_b)


cdef _forward(const floating[:, :, :, ::1] x, const floating[:, :, :, ::1] kernel,
              const floating[::1] bias, floating[:, :, :, ::1] out):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef Py_ssize_t cin = x.shape[3], cout = kernel.shape[3]
    if kernel.shape[0] != 3 or kernel.shape[1] != 3 or kernel.shape[2] != cin:
        raise ValueError("kernel shape does not match input channels")
    if 9 * cin > FABFIX_MAX_K:
        raise ValueError("too many input channels")
    if n == 0 or h == 0 or w == 0:
        return
    with nogil:
        if floating is float:
            conv3x3_fwd_f32(&x[0, 0, 0, 0], n, h, w, cin, &kernel[0, 0, 0, 0],
                            &bias[0], cout, &out[0, 0, 0, 0])
        else:
            conv3x3_fwd_f64(&x[0, 0, 0, 0], n, h, w, cin, &kernel[0, 0, 0, 0],
                            &bias[0], cout, &out[0, 0, 0, 0])


def conv3x3_forward(const floating[:, :, :, ::1] x, const floating[:, :, :, ::1] kernel,
                    const floating[::1] bias):
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((x.shape[0], x.shape[1], x.shape[2], kernel.shape[3]), dtype=dtype)
    cdef floating[:, :, :, ::1] out_v = out
    _forward(x, kernel, bias, out_v)
    return out


def conv3x3_backward(const floating[:, :, :, ::1] x, const floating[:, :, :, ::1] kernel,
                     const floating[:, :, :, ::1] grad_out, bint need_input_grad=True):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef Py_ssize_t cin = x.shape[3], cout = kernel.shape[3]
    dtype = np.float32 if floating is float else np.float64
    gk_arr = np.zeros((3, 3, cin, cout), dtype=dtype)
    gb_arr = np.zeros(cout, dtype=dtype)
    cdef floating[:, :, :, ::1] gk = gk_arr
    cdef floating[::1] gb = gb_arr
    if n > 0 and h > 0 and w > 0:
        with nogil:
            if floating is float:
                conv3x3_bwd_kernel_f32(&x[0, 0, 0, 0], n, h, w, cin,
                                       &grad_out[0, 0, 0, 0], cout,
                                       &gk[0, 0, 0, 0], &gb[0])
            else:
                conv3x3_bwd_kernel_f64(&x[0, 0, 0, 0], n, h, w, cin,
                                       &grad_out[0, 0, 0, 0], cout,
                                       &gk[0, 0, 0, 0], &gb[0])
    gx = None
    cdef const floating[:, :, :, ::1] kt_v
    cdef floating[:, :, :, ::1] gx_v
    cdef const floating[::1] zero_v
    if need_input_grad:
        # correlation of grad_out with the flipped, transposed kernel
        kt = np.ascontiguousarray(np.asarray(kernel)[::-1, ::-1].transpose(0, 1, 3, 2))
        gx = np.empty((n, h, w, cin), dtype=dtype)
        kt_v = kt
        gx_v = gx
        zero_v = np.zeros(cin, dtype=dtype)
        _forward(grad_out, kt_v, zero_v, gx_v)
    return gx, gk_arr, gb_arr


def adam_update(floating[::1] param, const floating[::1] grad, floating[::1] m,
                floating[::1] v, double lr, double beta1, double beta2,
                double eps, double bc1, double bc2):
    cdef Py_ssize_t i, size = param.shape[0]
    cdef floating g, mi, vi
    cdef floating b1 = beta1, b2 = beta2
    cdef floating c1 = 1.0 - beta1, c2 = 1.0 - beta2
    cdef floating step = lr / bc1, inv_bc2 = 1.0 / bc2, e = eps
    with nogil:
        for i in range(size):
            g = grad[i]
            mi = b1 * m[i] + c1 * g
            vi = b2 * v[i] + c2 * (g * g)
            m[i] = mi
            v[i] = vi
            if floating is float:
                param[i] -= step * mi / (sqrtf(vi * inv_bc2) + e)
            else:
                param[i] -= step * mi / (sqrt(vi * inv_bc2) + e)


def avgpool2_forward(const floating[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1] // 2, w = x.shape[2] // 2
    cdef Py_ssize_t c = x.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n, h, w, c), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, y, xx, k
    cdef floating q = 0.25
    with nogil:
        for b in range(n):
            for y in range(h):
                for xx in range(w):
                    for k in range(c):
                        out[b, y, xx, k] = q * (x[b, 2 * y, 2 * xx, k] + x[b, 2 * y + 1, 2 * xx, k]
                                                + x[b, 2 * y, 2 * xx + 1, k]
                                                + x[b, 2 * y + 1, 2 * xx + 1, k])
    return out_arr


def avgpool2_backward(const floating[:, :, :, ::1] grad):
    cdef Py_ssize_t n = grad.shape[0], h = grad.shape[1], w = grad.shape[2]
    cdef Py_ssize_t c = grad.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n, 2 * h, 2 * w, c), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, y, xx, k
    cdef floating g
    with nogil:
        for b in range(n):
            for y in range(h):
                for xx in range(w):
                    for k in range(c):
                        g = 0.25 * grad[b, y, xx, k]
                        out[b, 2 * y, 2 * xx, k] = g
                        out[b, 2 * y + 1, 2 * xx, k] = g
                        out[b, 2 * y, 2 * xx + 1, k] = g
                        out[b, 2 * y + 1, 2 * xx + 1, k] = g
    return out_arr
