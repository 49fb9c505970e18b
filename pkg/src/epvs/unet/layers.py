"""Layer primitives with hand-written backward passes.

Everything here works on channels-last (B, H, W, C) float64 arrays.  Each
``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
consumes ``(dout, cache)``.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5


def _im2col3x3(x):
    B, H, W, C = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    # (B, H, W, kh, kw, C): channels innermost keeps the gather copy contiguous
    return sliding_window_view(xp, (3, 3), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3).reshape(B * H * W, 9 * C)


def conv3x3_forward(x, w, b=None):
    """'Same' 3x3 convolution (cross-correlation), w: (C_out, C_in, 3, 3)."""
    B, H, W, C = x.shape
    out_ch = w.shape[0]
    cols = _im2col3x3(x)
    out = cols @ w.transpose(0, 2, 3, 1).reshape(out_ch, 9 * C).T
    if b is not None:
        out += b
    return out.reshape(B, H, W, out_ch), (cols, w)


def conv3x3_backward(dout, cache):
    cols, w = cache
    out_ch, C = w.shape[:2]
    g = dout.reshape(-1, out_ch)
    dw = (g.T @ cols).reshape(out_ch, 3, 3, C).transpose(0, 3, 1, 2)
    db = g.sum(axis=0)
    # input gradient = 'same' correlation of dout with the flipped, transposed kernel
    dx, _ = conv3x3_forward(dout, w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    return dx, dw, db


def conv1x1_forward(x, w, b):
    """Pointwise convolution, w: (C_out, C_in, 1, 1)."""
    B, H, W, C = x.shape
    wmat = w.reshape(w.shape[0], C)
    flat = x.reshape(-1, C)
    out = flat @ wmat.T + b
    return out.reshape(B, H, W, -1), (x.shape, flat, wmat)


def conv1x1_backward(dout, cache):
    shape, flat, wmat = cache
    g = dout.reshape(-1, wmat.shape[0])
    dw = (g.T @ flat).reshape(wmat.shape[0], wmat.shape[1], 1, 1)
    db = g.sum(axis=0)
    dx = (g @ wmat).reshape(shape)
    return dx, dw, db


def upconv2x2_forward(x, w, b):
    """Stride-2 2x2 transposed convolution, w: (C_in, C_out, 2, 2)."""
    B, h, wd, C = x.shape
    out_ch = w.shape[1]
    flat = x.reshape(-1, C)
    y = (flat @ w.reshape(C, out_ch * 4)).reshape(B, h, wd, out_ch, 2, 2)
    out = y.transpose(0, 1, 4, 2, 5, 3).reshape(B, 2 * h, 2 * wd, out_ch) + b
    return out, (x.shape, flat, w)


def upconv2x2_backward(dout, cache):
    (B, h, wd, C), flat, w = cache
    out_ch = w.shape[1]
    g = dout.reshape(B, h, 2, wd, 2, out_ch).transpose(0, 1, 3, 5, 2, 4).reshape(-1, out_ch * 4)
    dw = (flat.T @ g).reshape(w.shape)
    dx = (g @ w.reshape(C, out_ch * 4).T).reshape(B, h, wd, C)
    db = dout.sum(axis=(0, 1, 2))
    return dx, dw, db


def maxpool2x2_forward(x):
    B, H, W, C = x.shape
    h, w = H // 2, W // 2
    windows = x.reshape(B, h, 2, w, 2, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, h, w, C, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool2x2_backward(dout, cache):
    (B, H, W, C), idx = cache
    g = np.zeros(idx.shape + (4,))
    np.put_along_axis(g, idx[..., None], dout[..., None], axis=-1)
    return g.reshape(B, H // 2, W // 2, C, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(B, H, W, C)


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train, momentum=0.1):
    """Per-channel normalization; in training mode the running stats are updated in place."""
    if train:
        mean = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
        n = x.size // x.shape[-1]
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean) * inv_std
    return xhat * gamma + beta, (xhat, inv_std, gamma, train)


def batchnorm_backward(dout, cache):
    xhat, inv_std, gamma, train = cache
    dgamma = (dout * xhat).sum(axis=(0, 1, 2))
    dbeta = dout.sum(axis=(0, 1, 2))
    dxhat = dout * gamma
    if not train:
        return dxhat * inv_std, dgamma, dbeta
    n = dout.size // dout.shape[-1]
    dx = (inv_std / n) * (
        n * dxhat - dxhat.sum(axis=(0, 1, 2)) - xhat * (dxhat * xhat).sum(axis=(0, 1, 2))
    )
    return dx, dgamma, dbeta


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def log_softmax(logits, axis=-1):
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(logits, axis=-1):
    return np.exp(log_softmax(logits, axis))


def weighted_cross_entropy(logits, labels, class_weights):
    """Mean over voxels of -w[y] * log softmax(logits)[y].

    logits: (B, H, W, K), labels: (B, H, W) ints.  Returns (loss, dlogits).
    """
    logp = log_softmax(logits)
    w = np.asarray(class_weights, dtype=np.float64)[labels]
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    n = labels.size
    loss = -(w * picked).sum() / n
    grad = np.exp(logp)
    np.put_along_axis(grad, labels[..., None], np.take_along_axis(grad, labels[..., None], -1) - 1.0, axis=-1)
    grad *= (w / n)[..., None]
    return float(loss), grad
