"""Prior distributions over simulator parameters.

Each prior samples, evaluates its log density (on plain arrays or graph
nodes; the graph path assumes in-support inputs, which the flow's
SupportMap guarantees during variational fitting), and knows the support
bounds from which the posterior flow's SupportMap is built.
"""

from __future__ import annotations

import numpy as np

from . import ndiff as nd
from .flows import SupportMap

LOG_2PI = float(np.log(2.0 * np.pi))


class Normal:
    """Independent Gaussian per dimension."""

    def __init__(self, mean, std):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        self.std = np.broadcast_to(np.asarray(std, dtype=np.float64),
                                   self.mean.shape).astype(np.float64)
        self.d = self.mean.shape[0]

    def sample(self, n, rng):
        return self.mean + self.std * rng.standard_normal((n, self.d))

    def log_prob(self, theta):
        z = nd.div(nd.sub(theta, self.mean), self.std)
        return nd.sub(nd.mul(-0.5, nd.sum(nd.square(z), axis=1)),
                      float(np.sum(np.log(self.std)) + 0.5 * self.d * LOG_2PI))

    def support_bounds(self):
        return np.full(self.d, -np.inf), np.full(self.d, np.inf)

    def std_dev(self):
        return self.std.copy()


class MultivariateNormal:
    """Full-covariance Gaussian (smoothness priors and the like)."""

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.cov = np.asarray(cov, dtype=np.float64)
        self.d = self.mean.shape[0]
        self._chol = np.linalg.cholesky(self.cov)
        self._prec = np.linalg.inv(self.cov)
        sign, logdet = np.linalg.slogdet(self.cov)
        if sign <= 0:
            raise ValueError("covariance must be positive definite")
        self._log_norm = 0.5 * (self.d * LOG_2PI + logdet)

    def sample(self, n, rng):
        return self.mean + rng.standard_normal((n, self.d)) @ self._chol.T

    def log_prob(self, theta):
        delta = nd.sub(theta, self.mean)
        quad = nd.sum(nd.mul(nd.matmul(delta, self._prec), delta), axis=1)
        return nd.sub(nd.mul(-0.5, quad), self._log_norm)

    def support_bounds(self):
        return np.full(self.d, -np.inf), np.full(self.d, np.inf)

    def std_dev(self):
        return np.sqrt(np.diag(self.cov))


class BoxUniform:
    """Uniform over an axis-aligned box."""

    def __init__(self, low, high):
        self.low = np.atleast_1d(np.asarray(low, dtype=np.float64))
        self.high = np.atleast_1d(np.asarray(high, dtype=np.float64))
        self.d = self.low.shape[0]
        self._log_vol = float(np.sum(np.log(self.high - self.low)))

    def sample(self, n, rng):
        return rng.uniform(self.low, self.high, size=(n, self.d))

    def log_prob(self, theta):
        if nd.is_node(theta):
            n = theta.value.shape[0]
            return nd.constant(np.full(n, -self._log_vol))
        theta = np.asarray(theta, dtype=np.float64)
        inside = np.all((theta >= self.low) & (theta <= self.high), axis=1)
        return np.where(inside, -self._log_vol, -np.inf)

    def support_bounds(self):
        return self.low.copy(), self.high.copy()

    def std_dev(self):
        return (self.high - self.low) / np.sqrt(12.0)


class LogNormal:
    """Independent log-normal per dimension; support is (0, inf)."""

    def __init__(self, mu, sigma):
        self.mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
        self.sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64),
                                     self.mu.shape).astype(np.float64)
        self.d = self.mu.shape[0]

    def sample(self, n, rng):
        return np.exp(self.mu + self.sigma * rng.standard_normal((n, self.d)))

    def log_prob(self, theta):
        if not nd.is_node(theta):
            theta = np.asarray(theta, dtype=np.float64)
            if np.any(theta <= 0):
                out = np.full(theta.shape[0], -np.inf)
                ok = np.all(theta > 0, axis=1)
                if np.any(ok):
                    out[ok] = nd.value_of(self.log_prob(nd.constant(theta[ok])))
                return out
        lt = nd.log(theta)
        z = nd.div(nd.sub(lt, self.mu), self.sigma)
        return nd.sub(nd.mul(-0.5, nd.sum(nd.square(z), axis=1)),
                      nd.add(nd.sum(lt, axis=1),
                             float(np.sum(np.log(self.sigma)) + 0.5 * self.d * LOG_2PI)))

    def support_bounds(self):
        return np.zeros(self.d), np.full(self.d, np.inf)

    def std_dev(self):
        return np.sqrt((np.exp(self.sigma**2) - 1.0)
                       * np.exp(2 * self.mu + self.sigma**2))


def support_map_for(prior) -> SupportMap | None:
    """SupportMap matching the prior's support; None when unconstrained."""
    low, high = prior.support_bounds()
    if np.all(np.isinf(low)) and np.all(np.isinf(high)):
        return None
    return SupportMap(low, high)
