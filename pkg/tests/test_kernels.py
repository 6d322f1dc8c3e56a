"""Parity between the numba kernels and the pure-numpy reference."""

import numpy as np
import pytest

from dpzv import _kernels_numpy as knp

knb = pytest.importorskip("dpzv._kernels_numba")


def _random_case(dtype, seed=0, B=7, n_in=5, n_hid=4, n_out=3):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(B, n_in)).astype(dtype)
    W1 = rng.normal(size=(n_hid, n_in)).astype(dtype)
    b1 = rng.normal(size=n_hid).astype(dtype)
    W2 = rng.normal(size=(n_out, n_hid)).astype(dtype)
    b2 = rng.normal(size=n_out).astype(dtype)
    y = rng.integers(0, n_out, size=B).astype(np.int64)
    return X, W1, b1, W2, b2, y


@pytest.mark.parametrize("dtype,rtol", [(np.float32, 1e-5), (np.float64, 1e-12)])
class TestParity:
    def test_linear_forward(self, dtype, rtol):
        X, W1, b1, _, _, _ = _random_case(dtype)
        np.testing.assert_allclose(
            knb.linear_forward(X, W1, b1), knp.linear_forward(X, W1, b1),
            rtol=rtol, atol=rtol,
        )

    def test_mlp1_forward(self, dtype, rtol):
        X, W1, b1, W2, b2, _ = _random_case(dtype)
        np.testing.assert_allclose(
            knb.mlp1_forward(X, W1, b1, W2, b2),
            knp.mlp1_forward(X, W1, b1, W2, b2),
            rtol=rtol, atol=rtol,
        )

    def test_head_losses(self, dtype, rtol):
        X, W1, b1, W2, b2, y = _random_case(dtype)
        np.testing.assert_allclose(
            knb.head_losses(X, W1, b1, W2, b2, y),
            knp.head_losses(X, W1, b1, W2, b2, y),
            rtol=rtol, atol=rtol,
        )

    def test_head_mean_loss(self, dtype, rtol):
        X, W1, b1, W2, b2, y = _random_case(dtype)
        a = knb.head_mean_loss(X, W1, b1, W2, b2, y)
        b = knp.head_mean_loss(X, W1, b1, W2, b2, y)
        assert abs(a - b) <= rtol * (1 + abs(b))

    def test_head_grads(self, dtype, rtol):
        X, W1, b1, W2, b2, y = _random_case(dtype)
        got = knb.head_grads(X, W1, b1, W2, b2, y)
        want = knp.head_grads(X, W1, b1, W2, b2, y)
        for g, w in zip(got, want):
            np.testing.assert_allclose(g, w, rtol=rtol, atol=rtol)


def test_backend_deterministic():
    X, W1, b1, W2, b2, y = _random_case(np.float32, seed=3)
    first = knb.head_grads(X, W1, b1, W2, b2, y)
    second = knb.head_grads(X, W1, b1, W2, b2, y)
    for a, b in zip(first, second):
        assert np.array_equal(a, b)


def test_losses_are_float64_for_float32_inputs():
    X, W1, b1, W2, b2, y = _random_case(np.float32, seed=5)
    assert knp.head_losses(X, W1, b1, W2, b2, y).dtype == np.float64
    assert knb.head_losses(X, W1, b1, W2, b2, y).dtype == np.float64
