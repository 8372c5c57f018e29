import numpy as np
import pytest

import weakiv


def make_iv_dataset(seed, n=300, k=3, d=1, pi_scale=1.0, beta=None):
    """Random continuous-instrument dataset for algebraic identity tests."""
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, k))
    pi = pi_scale * rng.normal(size=(k, d))
    if beta is None:
        beta = rng.normal(size=d)
    v = rng.normal(size=(n, d))
    eps = rng.normal(size=n)
    x = z @ pi + v
    y = x @ np.asarray(beta, dtype=float) + eps
    return weakiv.Dataset(y=y, x=x, z=z)


def make_cell_dataset(seed, n=800, mode="weak"):
    """Benchmark-design dataset (discrete cells), for reduced-form tests."""
    dgp = weakiv.benchmark_dgp(mode, n=n, seed=seed)
    return weakiv.draw_dataset(dgp)


@pytest.fixture(scope="session")
def weak_dgp():
    return weakiv.benchmark_dgp("weak", n=1000, seed=0)


@pytest.fixture(scope="session")
def weak_data(weak_dgp):
    return weakiv.draw_dataset(weak_dgp)


@pytest.fixture(scope="session")
def weak_fits(weak_data):
    ols = weakiv.ols_reduced_form(weak_data)
    gls = weakiv.fgls_reduced_form(weak_data)
    return ols, gls
