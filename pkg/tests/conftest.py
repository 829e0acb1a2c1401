"""Shared fixtures and numerical helpers for the test suite."""

import numpy as np
import pytest

from motionalign.autodiff import Tensor


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar f at x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat_x, flat_g = x.reshape(-1), g.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        up = f(x)
        flat_x[i] = orig - h
        down = f(x)
        flat_x[i] = orig
        flat_g[i] = (up - down) / (2.0 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.abs(analytic - numeric)
    den = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(num / den))


def assert_grad_matches(build_loss, arrays: dict, h: float = 1e-5,
                        tol: float = 1e-4) -> None:
    """Check analytic gradients of build_loss against finite differences.

    build_loss takes a dict of Tensors (same keys as ``arrays``) and must
    return a scalar Tensor.
    """
    tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
    loss = build_loss(tensors)
    loss.backward()
    for key, arr in arrays.items():
        def scalar(x, _key=key):
            probe = {k: Tensor(v.copy()) for k, v in arrays.items()}
            probe[_key] = Tensor(x)
            return float(build_loss(probe).data)

        num = numeric_grad(scalar, arr.copy(), h=h)
        ana = tensors[key].grad
        assert ana is not None, f"no gradient reached {key}"
        err = rel_error(ana, num)
        assert err < tol, f"gradient mismatch for {key}: rel err {err:.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(0)
