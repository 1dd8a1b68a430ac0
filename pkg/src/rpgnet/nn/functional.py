"""Forward and backward passes of the layer primitives, NCHW row-major.

Every backward function returns exact gradients of its forward map; the
finite-difference tests in ``tests/test_nn.py`` pin that down.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _out_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def _windows(x, k, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # (N, C, Ho, Wo, k, k)
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d_forward(x, kernel, stride=1, padding=0):
    """Cross-correlation of ``x`` (N, C, H, W) with ``kernel`` (O, C, k, k)."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError("conv2d expects 4-d input and kernel")
    if x.shape[1] != kernel.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects "
                         f"{kernel.shape[1]}")
    k = kernel.shape[2]
    if kernel.shape[3] != k:
        raise ValueError("only square kernels are supported")
    if _out_size(x.shape[2], k, stride, padding) < 1 or \
            _out_size(x.shape[3], k, stride, padding) < 1:
        raise ValueError("kernel larger than padded input")
    cols = _windows(x, k, stride, padding)
    out = np.tensordot(cols, kernel, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward(x, kernel, grad_out, stride=1, padding=0):
    """Return ``(grad_x, grad_kernel)`` for :func:`conv2d_forward`."""
    n, c, h, w = x.shape
    o, _, k, _ = kernel.shape
    ho = _out_size(h, k, stride, padding)
    wo = _out_size(w, k, stride, padding)
    if grad_out.shape != (n, o, ho, wo):
        raise ValueError(f"grad_out shape {grad_out.shape} != {(n, o, ho, wo)}")
    cols = _windows(x, k, stride, padding)
    grad_k = np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 2, 3]))

    hp, wp = h + 2 * padding, w + 2 * padding
    grad_xp = np.zeros((n, c, hp, wp), dtype=x.dtype)
    # (N, Ho, Wo, C, k, k) contribution of every output pixel to its window
    contrib = np.tensordot(grad_out, kernel, axes=([1], [0]))
    for i in range(k):
        for j in range(k):
            grad_xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                contrib[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    grad_x = grad_xp[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(grad_x), grad_k.astype(kernel.dtype, copy=False)


def dense_forward(x, weight, bias=None):
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out


def dense_backward(x, weight, grad_out):
    """Return ``(grad_x, grad_weight, grad_bias)``."""
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train=True,
                      update_stats=True, eps=BN_EPS, momentum=BN_MOMENTUM):
    """Per-channel batch normalization over every axis except 1.

    In train mode the batch statistics are used and, if ``update_stats``,
    the running buffers are updated in place (unbiased variance, like the
    usual frameworks).  Returns ``(out, cache)``.
    """
    if x.shape[0] == 0:
        raise ValueError("batch-norm needs a non-empty batch")
    axes = (0,) + tuple(range(2, x.ndim))
    shape = [1, -1] + [1] * (x.ndim - 2)
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if update_stats:
            count = x.size // x.shape[1]
            unbiased = var * (count / max(count - 1, 1))
            running_mean *= 1 - momentum
            running_mean += momentum * mean
            running_var *= 1 - momentum
            running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.reshape(shape) * xhat + beta.reshape(shape)
    return out.astype(x.dtype, copy=False), (xhat, inv_std, gamma, train)


def batchnorm_backward(grad_out, cache):
    """Return ``(grad_x, grad_gamma, grad_beta)``."""
    xhat, inv_std, gamma, train = cache
    axes = (0,) + tuple(range(2, grad_out.ndim))
    shape = [1, -1] + [1] * (grad_out.ndim - 2)
    grad_beta = grad_out.sum(axis=axes)
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    g = grad_out * gamma.reshape(shape)
    if not train:
        return g * inv_std.reshape(shape), grad_gamma, grad_beta
    count = grad_out.size // grad_out.shape[1]
    grad_x = (inv_std.reshape(shape) / count) * (
        count * g
        - g.sum(axis=axes).reshape(shape)
        - xhat * (g * xhat).sum(axis=axes).reshape(shape)
    )
    return grad_x.astype(grad_out.dtype, copy=False), grad_gamma, grad_beta


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    return grad_out * (x > 0)


def maxpool_forward(x, k, stride):
    """Max pooling; returns ``(out, argmax)`` with argmax over the k*k window."""
    win = _windows(x, k, stride, 0)
    n, c, ho, wo = win.shape[:4]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    return np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0], arg


def maxpool_backward(x, arg, grad_out, k, stride):
    grad_x = np.zeros_like(x)
    n, c, ho, wo = grad_out.shape
    di, dj = np.divmod(arg, k)
    rows = np.arange(ho)[None, None, :, None] * stride + di
    cols = np.arange(wo)[None, None, None, :] * stride + dj
    nn_ = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, :, None, None]
    np.add.at(grad_x, (nn_, cc, rows, cols), grad_out)
    return grad_x


def avgpool_forward(x, k, stride):
    return _windows(x, k, stride, 0).mean(axis=(4, 5))


def avgpool_backward(x, grad_out, k, stride):
    grad_x = np.zeros_like(x)
    ho, wo = grad_out.shape[2:]
    share = grad_out / (k * k)
    for i in range(k):
        for j in range(k):
            grad_x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += share
    return grad_x


def residual_add(a, b):
    if a.shape != b.shape:
        raise ValueError(f"residual shapes differ: {a.shape} vs {b.shape}")
    return a + b


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError("one label per row is required")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(n)
    loss = -log_p[rows, labels].mean()
    grad = np.exp(log_p)
    grad[rows, labels] -= 1
    return loss, grad / n


def mse_loss(outputs, targets):
    """Half mean squared error summed over features, averaged over rows."""
    diff = outputs - targets
    n = outputs.shape[0]
    return 0.5 * float((diff * diff).sum()) / n, diff / n
