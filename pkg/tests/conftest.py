import numpy as np
import pytest

from covadj import make_dataset


def random_trial(rng, n=None, p=None, binary=False, pi=None):
    """A random complete trial with `p` Gaussian/Bernoulli covariates named x0, x1, ..."""
    n = n or int(rng.integers(30, 200))
    p = rng.integers(1, 4) if p is None else p
    pi = pi or rng.uniform(0.3, 0.7)
    z = (rng.random(n) < pi).astype(int)
    z[:2] = (1, 0)
    x = {f"x{j}": (rng.normal(size=n) if j % 2 == 0 else (rng.random(n) < 0.4).astype(float))
         for j in range(p)}
    eta = 0.3 + 0.5 * z + sum((0.8 - 0.3 * j) * v for j, v in enumerate(x.values()))
    if binary:
        y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
    else:
        y = eta + 0.5 * z * x["x0"] + rng.normal(size=n)
    return make_dataset(y, z, x)


def ols(x, y):
    """Normal-equations least squares: the independent linear oracle."""
    return np.linalg.solve(x.T @ x, x.T @ y)


@pytest.fixture
def rng():
    return np.random.default_rng(20240101)


@pytest.fixture
def eight_patients():
    # treated (X, Y): (0,1) (0,1) (1,0) (1,1); control: (0,0) (0,1) (1,0) (1,0)
    return make_dataset([1, 1, 0, 1, 0, 1, 0, 0], [1, 1, 1, 1, 0, 0, 0, 0],
                        {"x": [0, 0, 1, 1, 0, 0, 1, 1]})
