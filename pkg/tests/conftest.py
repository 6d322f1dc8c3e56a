import numpy as np
import pytest

from dpzv.backend import backend_name, kernels


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    """Compile the numba kernels once so timed tests measure math, not JIT."""
    if hasattr(kernels, "warmup"):
        kernels.warmup()
    yield


@pytest.fixture(scope="session")
def backend():
    return backend_name()


def assert_close(actual, expected, rtol=0.0, atol=0.0, msg=""):
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    err = np.abs(actual - expected)
    bound = atol + rtol * np.abs(expected)
    assert np.all(err <= bound), (
        f"{msg} max err {err.max():.3g} exceeds bound "
        f"(rtol={rtol:g}, atol={atol:g})"
    )
