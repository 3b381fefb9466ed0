import numpy as np
import pytest

from forgeaug.data import generate_toy_dataset


def fd_check(fn, arrays, grads, h=1e-5, floor=1e-6):
    """Max relative error between analytic ``grads`` and central differences of ``fn()``.

    ``arrays`` are the raw arrays ``fn`` reads (perturbed in place).
    """
    worst = 0.0
    for arr, grad in zip(arrays, grads):
        flat = arr.reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = fn()
            flat[i] = old - h
            down = fn()
            flat[i] = old
            num[i] = (up - down) / (2 * h)
        g = np.asarray(grad).reshape(-1)
        err = np.abs(g - num) / np.maximum(np.maximum(np.abs(g), np.abs(num)), floor)
        worst = max(worst, float(err.max()))
    return worst


@pytest.fixture(scope="session")
def toy_small():
    ds, _ = generate_toy_dataset(8, 8, seed=3)
    return ds


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
