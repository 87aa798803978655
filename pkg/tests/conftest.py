import numpy as np
import pytest

from qbit.tensor import Tensor


def finite_difference(fn, values: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar-valued fn at `values`."""
    values = np.asarray(values, dtype=np.float64)
    grad = np.zeros_like(values)
    flat = values.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + step
        hi = fn(bumped.reshape(values.shape))
        bumped[i] = flat[i] - step
        lo = fn(bumped.reshape(values.shape))
        g[i] = (hi - lo) / (2 * step)
    return grad


def check_gradient(build_loss, values: np.ndarray, rtol: float = 1e-4,
                   step: float = 1e-5) -> None:
    """Assert the autodiff gradient of build_loss(Tensor) matches central
    finite differences of build_loss evaluated on raw arrays."""
    x = Tensor(values, requires_grad=True)
    build_loss(x).backward()
    numeric = finite_difference(lambda v: build_loss(Tensor(v)).item(), values, step)
    scale = np.maximum(np.abs(numeric), 1e-6)
    assert x.grad is not None
    np.testing.assert_allclose(x.grad, numeric, rtol=rtol, atol=rtol * scale.max())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
