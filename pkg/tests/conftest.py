import numpy as np
import pytest

from dmlcrc.dataset import FeatureMatrix


def gaussian_elimination(A, b):
    """Dense solve with partial pivoting, independent of LAPACK's Cholesky."""
    A = [list(map(float, row)) for row in A]
    b = list(map(float, b))
    n = len(b)
    for col in range(n):
        piv = max(range(col, n), key=lambda r: abs(A[r][col]))
        A[col], A[piv] = A[piv], A[col]
        b[col], b[piv] = b[piv], b[col]
        for r in range(col + 1, n):
            m = A[r][col] / A[col][col]
            for c in range(col, n):
                A[r][c] -= m * A[col][c]
            b[r] -= m * b[col]
    x = [0.0] * n
    for r in reversed(range(n)):
        s = b[r] - sum(A[r][c] * x[c] for c in range(r + 1, n))
        x[r] = s / A[r][r]
    return np.array(x)


def ridge_gradient_descent(X, y, lam, steps=10_000):
    """Minimize ||y - X a||^2 + lam ||a||^2 by plain gradient descent."""
    L = 2 * (np.linalg.norm(X, 2) ** 2 + lam)
    a = np.zeros(X.shape[1])
    for _ in range(steps):
        a -= (2 * X.T @ (X @ a - y) + 2 * lam * a) / L
    return a


def ridge_accelerated_descent(X, y, lam, tol=1e-14, max_steps=500_000):
    """Minimize ||y - X a||^2 + lam ||a||^2 by Nesterov descent with gradient restarts."""
    L = 2 * (np.linalg.norm(X, 2) ** 2 + lam)
    a = np.zeros(X.shape[1])
    z, t = a.copy(), 1.0
    for _ in range(max_steps):
        g = 2 * X.T @ (X @ z - y) + 2 * lam * z
        if np.max(np.abs(g)) < tol:
            return z
        a_next = z - g / L
        t_next = (1 + np.sqrt(1 + 4 * t * t)) / 2
        if g @ (a_next - a) > 0:
            # momentum points uphill: restart
            t_next, z = 1.0, a_next
        else:
            z = a_next + (t - 1) / t_next * (a_next - a)
        a, t = a_next, t_next
    return a


def random_fm(rng, d, n_per_class, c, normalize=True):
    labels = np.repeat(np.arange(c), n_per_class)
    cols = rng.standard_normal((d, c * n_per_class))
    if normalize:
        cols /= np.linalg.norm(cols, axis=0)
    return FeatureMatrix(cols, labels, c)


def random_spd(rng, d, floor=0.5):
    M = rng.standard_normal((d, d))
    return M @ M.T / d + floor * np.eye(d)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
