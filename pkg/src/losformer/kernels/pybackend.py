"""Pure-numpy reference implementations of the hot kernels.

Contract notes shared with the compiled backend:
  * inputs are C-contiguous float64, rank 2; row-wise ops reduce over axis 1
  * layer_norm_rows returns (y, mean, rstd) so the backward pass can reuse
    the saved statistics instead of recomputing them
  * adam_update mutates param, m and v in place and applies decoupled
    weight decay after the adaptive step
"""

from __future__ import annotations

import numpy as np

_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def gelu(x):
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_backward(x, dy):
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner)


def softmax_rows(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(p, dp):
    inner = (dp * p).sum(axis=1, keepdims=True)
    return p * (dp - inner)


def layer_norm_rows(x, gain, bias, eps):
    mean = x.mean(axis=1)
    centered = x - mean[:, None]
    var = (centered ** 2).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd[:, None]
    return xhat * gain + bias, mean, rstd


def layer_norm_rows_backward(x, gain, mean, rstd, dy):
    xhat = (x - mean[:, None]) * rstd[:, None]
    dxhat = dy * gain
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    return dx, dgain, dbias


def adam_update(param, grad, m, v, step, lr, beta1, beta2, eps, weight_decay):
    if weight_decay != 0.0:
        param *= 1.0 - lr * weight_decay
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad ** 2
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
