"""Pure-numpy kernels: the reference backend.

Device forwards run in the parameter dtype; loss and gradient math runs in
float64 so that the scalar feedback channel and its tests are independent
of the storage precision.  The numba backend mirrors these signatures
exactly (see _kernels_numba.py); parity is enforced by tests.
"""

import numpy as np

NAME = "numpy"


def linear_forward(X, W, b):
    return X @ W.T + b


def mlp1_forward(X, W1, b1, W2, b2):
    hidden = X @ W1.T + b1
    np.maximum(hidden, 0, out=hidden)
    return hidden @ W2.T + b2


def _head_logits(H, W1, b1, W2, b2):
    z1 = H.astype(np.float64, copy=False) @ W1.T.astype(np.float64, copy=False)
    z1 += b1.astype(np.float64, copy=False)
    np.maximum(z1, 0, out=z1)
    z2 = z1 @ W2.T.astype(np.float64, copy=False)
    z2 += b2.astype(np.float64, copy=False)
    return z1, z2


def head_losses(H, W1, b1, W2, b2, y):
    """Per-sample softmax cross-entropy of the two-layer head."""
    _, z2 = _head_logits(H, W1, b1, W2, b2)
    zmax = z2.max(axis=1)
    shifted = z2 - zmax[:, None]
    lse = np.log(np.exp(shifted).sum(axis=1)) + zmax
    return lse - z2[np.arange(z2.shape[0]), y]


def head_mean_loss(H, W1, b1, W2, b2, y):
    return float(head_losses(H, W1, b1, W2, b2, y).mean())


def head_grads(H, W1, b1, W2, b2, y):
    """Gradients of the mean per-sample loss.

    Returns (gW1, gb1, gW2, gb2, gH); gH rows are the gradients with
    respect to each sample's concatenated embedding (1/B folded in).
    """
    B = H.shape[0]
    a1, z2 = _head_logits(H, W1, b1, W2, b2)
    zmax = z2.max(axis=1, keepdims=True)
    p = np.exp(z2 - zmax)
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(B), y] -= 1.0
    dz2 = p / B
    gW2 = dz2.T @ a1
    gb2 = dz2.sum(axis=0)
    da1 = dz2 @ W2.astype(np.float64, copy=False)
    dz1 = da1 * (a1 > 0)
    gW1 = dz1.T @ H.astype(np.float64, copy=False)
    gb1 = dz1.sum(axis=0)
    gH = dz1 @ W1.astype(np.float64, copy=False)
    return gW1, gb1, gW2, gb2, gH
