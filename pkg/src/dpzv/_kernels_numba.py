"""Numba-compiled kernels: the accelerated backend.

Same signatures and same math as _kernels_numpy; loops are written out so
numba can fuse them and avoid temporaries.  Loss/gradient accumulation is
float64 regardless of the storage dtype, matching the numpy twin.
Compiled variants are cached on disk, so the JIT cost is paid once.
"""

import numpy as np
from numba import njit

NAME = "numba"


@njit(cache=True)
def linear_forward(X, W, b):
    B, n_in = X.shape
    n_out = W.shape[0]
    out = np.empty((B, n_out), dtype=X.dtype)
    for i in range(B):
        for j in range(n_out):
            acc = b[j]
            for k in range(n_in):
                acc += W[j, k] * X[i, k]
            out[i, j] = acc
    return out


@njit(cache=True)
def mlp1_forward(X, W1, b1, W2, b2):
    B, n_in = X.shape
    n_hid = W1.shape[0]
    n_out = W2.shape[0]
    out = np.empty((B, n_out), dtype=X.dtype)
    hidden = np.empty(n_hid, dtype=X.dtype)
    for i in range(B):
        for j in range(n_hid):
            acc = b1[j]
            for k in range(n_in):
                acc += W1[j, k] * X[i, k]
            hidden[j] = acc if acc > 0 else 0
        for j in range(n_out):
            acc = b2[j]
            for k in range(n_hid):
                acc += W2[j, k] * hidden[k]
            out[i, j] = acc
    return out


@njit(cache=True)
def _head_forward_sample(H, W1, b1, W2, b2, i, a1, z2):
    n_in = H.shape[1]
    n_hid = W1.shape[0]
    n_out = W2.shape[0]
    for j in range(n_hid):
        acc = np.float64(b1[j])
        for k in range(n_in):
            acc += np.float64(W1[j, k]) * np.float64(H[i, k])
        a1[j] = acc if acc > 0 else 0.0
    for j in range(n_out):
        acc = np.float64(b2[j])
        for k in range(n_hid):
            acc += np.float64(W2[j, k]) * a1[k]
        z2[j] = acc


@njit(cache=True)
def head_losses(H, W1, b1, W2, b2, y):
    B = H.shape[0]
    n_hid = W1.shape[0]
    n_out = W2.shape[0]
    losses = np.empty(B, dtype=np.float64)
    a1 = np.empty(n_hid, dtype=np.float64)
    z2 = np.empty(n_out, dtype=np.float64)
    for i in range(B):
        _head_forward_sample(H, W1, b1, W2, b2, i, a1, z2)
        zmax = z2[0]
        for j in range(1, n_out):
            if z2[j] > zmax:
                zmax = z2[j]
        s = 0.0
        for j in range(n_out):
            s += np.exp(z2[j] - zmax)
        losses[i] = np.log(s) + zmax - z2[y[i]]
    return losses


@njit(cache=True)
def head_mean_loss(H, W1, b1, W2, b2, y):
    losses = head_losses(H, W1, b1, W2, b2, y)
    total = 0.0
    for i in range(losses.shape[0]):
        total += losses[i]
    return total / losses.shape[0]


@njit(cache=True)
def head_grads(H, W1, b1, W2, b2, y):
    B, n_in = H.shape
    n_hid = W1.shape[0]
    n_out = W2.shape[0]
    gW1 = np.zeros((n_hid, n_in), dtype=np.float64)
    gb1 = np.zeros(n_hid, dtype=np.float64)
    gW2 = np.zeros((n_out, n_hid), dtype=np.float64)
    gb2 = np.zeros(n_out, dtype=np.float64)
    gH = np.zeros((B, n_in), dtype=np.float64)
    a1 = np.empty(n_hid, dtype=np.float64)
    z2 = np.empty(n_out, dtype=np.float64)
    dz2 = np.empty(n_out, dtype=np.float64)
    for i in range(B):
        _head_forward_sample(H, W1, b1, W2, b2, i, a1, z2)
        zmax = z2[0]
        for j in range(1, n_out):
            if z2[j] > zmax:
                zmax = z2[j]
        s = 0.0
        for j in range(n_out):
            dz2[j] = np.exp(z2[j] - zmax)
            s += dz2[j]
        for j in range(n_out):
            dz2[j] = dz2[j] / s
        dz2[y[i]] -= 1.0
        for j in range(n_out):
            dz2[j] /= B
        for j in range(n_out):
            gb2[j] += dz2[j]
            for k in range(n_hid):
                gW2[j, k] += dz2[j] * a1[k]
        for k in range(n_hid):
            if a1[k] > 0:
                acc = 0.0
                for j in range(n_out):
                    acc += dz2[j] * np.float64(W2[j, k])
                gb1[k] += acc
                for n in range(n_in):
                    gW1[k, n] += acc * np.float64(H[i, n])
                    gH[i, n] += acc * np.float64(W1[k, n])
    return gW1, gb1, gW2, gb2, gH


def warmup():
    """Trigger compilation of all kernels for both storage dtypes."""
    for dt in (np.float32, np.float64):
        X = np.ones((2, 3), dtype=dt)
        W = np.ones((2, 3), dtype=dt)
        b = np.zeros(2, dtype=dt)
        linear_forward(X, W, b)
        W2 = np.ones((2, 2), dtype=dt)
        mlp1_forward(X, W, b, W2, b)
        y = np.zeros(2, dtype=np.int64)
        head_losses(X, W, b, W2, b, y)
        head_mean_loss(X, W, b, W2, b, y)
        head_grads(X, W, b, W2, b, y)
