"""Memory-bound inner loops for the conv op.

Plain numpy throughout: an as_strided window view whose reshape performs
the single im2col gather copy, and a 9-slice scatter-add for the input
gradient. (A numba variant was measured and rejected: its threading layer
starves the BLAS pool on small machines.)
"""

import numpy as np


def im2col(xp, ho, wo, k, stride):
    """Padded input [B, HP, WP, C] -> cols [B*ho*wo, k*k*C]."""
    b, hp, wp, c = xp.shape
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, shape=(b, ho, wo, k, k, c),
        strides=(s0, s1 * stride, s2 * stride, s1, s2, s3))
    return win.reshape(b * ho * wo, k * k * c)


def col2im(dcols, shape, ho, wo, k, stride):
    """Scatter-add cols gradient back onto the padded input shape."""
    gxp = np.zeros(shape, dtype=dcols.dtype)
    b = shape[0]
    c = shape[3]
    d6 = dcols.reshape(b, ho, wo, k, k, c)
    for di in range(k):
        for dj in range(k):
            gxp[:, di:di + (ho - 1) * stride + 1:stride,
                dj:dj + (wo - 1) * stride + 1:stride, :] += d6[:, :, :, di, dj, :]
    return gxp


def silu_forward(x):
    """Returns (x * sigmoid(x), sigmoid(x))."""
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, s
