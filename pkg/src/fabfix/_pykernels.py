"""Pure-numpy implementations of the hot kernels.

Layout is NHWC throughout; 3x3 kernels are stored as (3, 3, C_in, C_out)
and applied with stride 1 and one pixel of zero padding.
"""

import numpy as np


def conv3x3_forward(x, kernel, bias):
    n, h, w, cin = x.shape
    cout = kernel.shape[3]
    pad = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    if cin == 1:
        # a 9-column im2col beats nine broadcast multiplies
        col = np.empty((n, h, w, 9), dtype=x.dtype)
        for dy in range(3):
            for dx in range(3):
                col[..., 3 * dy + dx] = pad[:, dy:dy + h, dx:dx + w, 0]
        out = col @ kernel.reshape(9, cout)
        out += bias
        return out
    out = np.empty((n, h, w, cout), dtype=x.dtype)
    out[...] = bias
    for dy in range(3):
        for dx in range(3):
            out += pad[:, dy:dy + h, dx:dx + w, :] @ kernel[dy, dx]
    return out


def conv3x3_backward(x, kernel, grad_out, need_input_grad=True):
    """Return (grad_x or None, grad_kernel, grad_bias)."""
    n, h, w, cin = x.shape
    cout = kernel.shape[3]
    pad = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    g2 = grad_out.reshape(-1, cout)
    grad_k = np.empty_like(kernel)
    for dy in range(3):
        for dx in range(3):
            win = pad[:, dy:dy + h, dx:dx + w, :].reshape(-1, cin)
            grad_k[dy, dx] = win.T @ g2
    grad_b = g2.sum(axis=0)

    grad_x = None
    if need_input_grad:
        gpad = np.zeros_like(pad)
        for dy in range(3):
            for dx in range(3):
                gpad[:, dy:dy + h, dx:dx + w, :] += grad_out @ kernel[dy, dx].T
        grad_x = gpad[:, 1:-1, 1:-1, :]
    return grad_x, grad_k, grad_b


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, bc1, bc2):
    """In-place Adam step on one parameter block; bc1/bc2 are 1 - beta**t."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    denom = np.sqrt(v / bc2)
    denom += eps
    param -= (lr / bc1) * m / denom


def avgpool2_forward(x):
    n, h, w, c = x.shape
    v = x.reshape(n, h // 2, 2, w // 2, 2, c)
    out = v[:, :, 0, :, 0] + v[:, :, 1, :, 0]
    out += v[:, :, 0, :, 1]
    out += v[:, :, 1, :, 1]
    out *= 0.25
    return out


def avgpool2_backward(grad):
    n, h, w, c = grad.shape
    out = np.empty((n, h, 2, w, 2, c), dtype=grad.dtype)
    q = grad * grad.dtype.type(0.25)
    out[...] = q[:, :, None, :, None, :]
    return out.reshape(n, 2 * h, 2 * w, c)
