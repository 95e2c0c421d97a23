import numpy as np
import pytest

# four-dimensional design: coordinate 1 independent of the rest
SIGMA4 = np.array([
    [0.4083, 0.0, 0.0, 0.0],
    [0.0, 0.456510, -0.451965, 0.265170],
    [0.0, -0.451965, 0.837030, -0.491090],
    [0.0, 0.265170, -0.491090, 0.524365],
])

# bivariate random-component covariance with unknown off-diagonal
SIGMA2_DIAG = (0.8166, 0.91302)


def random_pd(rng, d, ridge=0.5):
    m = rng.standard_normal((d, d))
    return m @ m.T + ridge * np.eye(d)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
