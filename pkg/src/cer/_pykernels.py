"""Numpy implementations of the hot tensor kernels.

These are the reference versions; ``_ckernels.pyx`` mirrors every function
here with the same signature and must agree to floating-point round-off.
"""
import numpy as np


def softmax_forward(x, mask=None):
    """Row softmax over the last axis of ``x`` (shape ``(..., m, n)``).

    ``mask`` is an additive ``(m, n)`` matrix broadcast over the leading axes.
    """
    if mask is not None:
        x = x + mask
    z = x - x.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def softmax_backward(y, g):
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


def layernorm_forward(x, gamma, beta, eps):
    """Normalize the rows of a 2-D array. Returns ``(y, xhat, rstd)``."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layernorm_backward(g, xhat, rstd, gamma):
    """Returns ``(dx, dgamma, dbeta)`` for :func:`layernorm_forward`."""
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    gx = g * gamma
    d = xhat.shape[1]
    dx = (gx - gx.mean(axis=1, keepdims=True)
          - xhat * (gx * xhat).sum(axis=1, keepdims=True) / d) * rstd[:, None]
    return dx, dgamma, dbeta


def segment_max_forward(x, starts, lengths):
    """Max over ``x[b, starts[b]:starts[b]+lengths[b], :]`` for every ``b``.

    Returns the pooled ``(B, d)`` array and the ``(B, d)`` time index of each
    maximum; ties go to the lowest index.
    """
    B, _, d = x.shape
    out = np.empty((B, d))
    arg = np.empty((B, d), dtype=np.int64)
    for b in range(B):
        s = int(starts[b])
        window = x[b, s:s + int(lengths[b])]
        # argmax returns the first occurrence, which is the tie rule we want
        idx = window.argmax(axis=0)
        arg[b] = idx + s
        out[b] = window[idx, np.arange(d)]
    return out, arg
