import numpy as np

from glmar_bayes.model import Dataset


def make_dataset(rng, N, T=60, K=2, P=1, W=None, noise=1.0):
    """Random design with a constant last column and i.i.d. noise of scale ``noise``."""
    X = np.column_stack([rng.standard_normal((T, K - 1)), np.ones(T)])
    W = rng.standard_normal((K, N)) if W is None else W
    Y = X @ W + noise * rng.standard_normal((T, N))
    return Dataset(Y=Y, Xfull=X, P=P)


class GaussianTarget:
    """Zero-mean Gaussian with covariance ``cov``; stands in for PosteriorTarget."""

    def __init__(self, cov):
        self.cov = np.atleast_2d(np.asarray(cov, dtype=float))
        self.precision = np.linalg.inv(self.cov)
        self.dim = self.cov.shape[0]

    def log_density(self, x):
        return float(-0.5 * x @ self.precision @ x)

    def gradient(self, x):
        return -self.precision @ x


class QuarticTarget:
    """exp(-sum(x^4)/4 - sum(x^2)/2): smooth and non-Gaussian."""

    dim = 3

    def log_density(self, x):
        return float(-np.sum(x ** 4) / 4 - np.sum(x ** 2) / 2)

    def gradient(self, x):
        return -x ** 3 - x


class PositiveTarget:
    """Exponential(1) on x > 0; undefined gradient outside the support."""

    dim = 1

    def log_density(self, x):
        return float(-x[0]) if x[0] > 0 else -np.inf

    def gradient(self, x):
        return -np.ones(1) if x[0] > 0 else None
