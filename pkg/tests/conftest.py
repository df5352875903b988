import numpy as np
import pytest

from kddg_lab import nn


def central_difference(fn, params, h=1e-5):
    """Numerical gradient of ``fn(flat_params) -> float`` by central differences."""
    out = np.zeros_like(params)
    for i in range(params.shape[0]):
        up = params.copy()
        dn = params.copy()
        up[i] += h
        dn[i] -= h
        out[i] = (fn(up) - fn(dn)) / (2 * h)
    return out


def assert_grad_close(analytic, numeric, rtol=1e-6, atol=1e-9):
    # componentwise relative error; atol only guards entries that are zero up to FD round-off
    err = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    bad = err > rtol * scale + atol
    assert not bad.any(), f"max rel err {np.max(err / np.maximum(scale, 1e-300))} at {np.flatnonzero(bad)[:5]}"


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def small_net(sizes, seed):
    return nn.Network.init(sizes, seed=seed)
