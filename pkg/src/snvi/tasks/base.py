"""Task bundles: prior + simulator + observation + optional oracle."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..samplers import SliceConfig, slice_sample


@dataclass
class Task:
    """A simulation-based inference problem.

    ``simulate(theta, rng) -> (x, valid)`` is a pure function of its
    arguments; rows flagged invalid may carry arbitrary x values (the
    driver replaces them with a marker and never trains on them).
    """

    name: str
    prior: object
    d_theta: int
    d_x: int
    simulate: Callable
    x_o: np.ndarray
    oracle: object = None
    posterior_family: str = "affine"
    true_log_likelihood: Callable = None
    notes: str = ""


class AnalyticGaussianOracle:
    """Closed-form Gaussian posterior."""

    kind = "analytic-posterior"

    def __init__(self, mean, cov):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
        self._chol = np.linalg.cholesky(self.cov)

    def sample(self, n, rng):
        return self.mean + rng.standard_normal((n, len(self.mean))) @ self._chol.T


class McmcOracle:
    """Reference posterior sampled by slice sampling the true likelihood."""

    kind = "mcmc"

    def __init__(self, prior, log_likelihood, chains=100, burn_in=300, thin=None):
        self.prior = prior
        self.log_likelihood = log_likelihood
        self.chains = chains
        self.burn_in = burn_in
        self.thin = thin

    def sample(self, n, rng):
        def potential(theta):
            lp = self.prior.log_prob(theta)
            out = np.full(len(theta), -np.inf)
            ok = np.isfinite(lp)
            if np.any(ok):
                out[ok] = lp[ok] + self.log_likelihood(theta[ok])
            return out

        cfg = SliceConfig(chains=self.chains, burn_in=self.burn_in, thin=self.thin)
        samples, _ = slice_sample(potential, self.prior, cfg, n, rng)
        return samples


class SamplerOracle:
    """Oracle defined by a direct sampling procedure."""

    kind = "direct-sampler"

    def __init__(self, fn):
        self._fn = fn

    def sample(self, n, rng):
        return self._fn(n, rng)
