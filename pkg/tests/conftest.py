import numpy as np
import pytest

from qfl.model import (
    Batch,
    ModelParameters,
    conv2d,
    dense,
    flatten,
    forward,
    init_model,
    loss_ce,
    maxpool2d,
    relu,
    softmax,
)


def fd_gradient(params, arch, batch, step=1e-5):
    """Central finite differences of the mean cross-entropy, one scalar at a time."""
    flat = params.flatten()
    shapes = params.shapes
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += step
        down[i] -= step
        lp = loss_ce(forward(ModelParameters.unflatten(up, shapes), arch, batch)[0], batch.labels)
        lm = loss_ce(forward(ModelParameters.unflatten(down, shapes), arch, batch)[0], batch.labels)
        grad[i] = (lp - lm) / (2 * step)
    return grad


def max_relative_error(analytic, numeric, floor=1e-6):
    a, n = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def random_small_network(rng):
    """A random conv/pool/dense stack with at most 500 parameters, plus a batch for it."""
    while True:
        c_in = int(rng.integers(1, 3))
        c1 = int(rng.integers(1, 4))
        size = int(rng.integers(6, 10))
        arch = [conv2d(c_in, c1), relu()]
        h = size - 2
        if rng.random() < 0.5 and h >= 5:
            c2 = int(rng.integers(1, 3))
            arch += [conv2d(c1, c2), relu()]
            c1, h = c2, h - 2
        arch.append(maxpool2d())
        h //= 2
        arch.append(flatten())
        feats = c1 * h * h
        if rng.random() < 0.5:
            hidden = int(rng.integers(2, 6))
            arch += [dense(feats, hidden), relu(), dense(hidden, 2)]
        else:
            arch.append(dense(feats, 2))
        arch.append(softmax())
        params = init_model(arch, int(rng.integers(2**32)), (c_in, size, size))
        if params.total_count > 500:
            continue
        # perturb biases away from zero so every path is exercised
        params = params.map(lambda t: t + rng.normal(0, 0.1, t.shape))
        b = int(rng.integers(1, 5))
        batch = Batch(rng.normal(0, 1, (b, c_in, size, size)), rng.integers(0, 2, b))
        return arch, params, batch


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    if call.when == "call":
        item.rep_call = outcome.get_result()
