"""Tractable toy tasks: the 1-d conjugate Gaussian, two moons, and the
invalid-data Gaussian."""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .. import priors
from .base import AnalyticGaussianOracle, SamplerOracle, Task

# conjugate Gaussian: prior N(0, 4), likelihood N(theta, 1), x_o = 1
GAUSS_PRIOR_VAR = 4.0
GAUSS_LIK_VAR = 1.0
GAUSS_XO = 1.0


def gaussian_toy(x_o=None) -> Task:
    prior = priors.Normal([0.0], [np.sqrt(GAUSS_PRIOR_VAR)])
    obs = GAUSS_XO if x_o is None else float(np.asarray(x_o).reshape(-1)[0])
    post_var = 1.0 / (1.0 / GAUSS_PRIOR_VAR + 1.0 / GAUSS_LIK_VAR)
    post_mean = post_var * obs / GAUSS_LIK_VAR

    def simulate(theta, rng):
        theta = np.atleast_2d(theta)
        x = theta + np.sqrt(GAUSS_LIK_VAR) * rng.standard_normal(theta.shape)
        return x, np.ones(len(theta), dtype=bool)

    def true_log_likelihood(x, theta):
        x = np.atleast_2d(x)
        theta = np.atleast_2d(theta)
        return (-0.5 * np.sum((x - theta) ** 2, axis=1) / GAUSS_LIK_VAR
                - 0.5 * np.log(2 * np.pi * GAUSS_LIK_VAR))

    return Task(
        name="gaussian_toy",
        prior=prior,
        d_theta=1,
        d_x=1,
        simulate=simulate,
        x_o=np.array([obs]),
        oracle=AnalyticGaussianOracle([post_mean], [[post_var]]),
        posterior_family="affine",
        true_log_likelihood=true_log_likelihood,
    )


def gaussian_toy_log_joint(theta):
    """log p(x_o, theta) for the conjugate toy; accepts graph nodes."""
    from .. import ndiff as nd

    lp_prior = nd.sub(nd.mul(-0.5 / GAUSS_PRIOR_VAR, nd.sum(nd.square(theta), axis=1)),
                      0.5 * np.log(2 * np.pi * GAUSS_PRIOR_VAR))
    delta = nd.sub(GAUSS_XO, theta)
    lp_lik = nd.sub(nd.mul(-0.5 / GAUSS_LIK_VAR, nd.sum(nd.square(delta), axis=1)),
                    0.5 * np.log(2 * np.pi * GAUSS_LIK_VAR))
    return nd.add(lp_prior, lp_lik)


# two moons: crescent noise shifted by the folded parameter sum
TM_R_MEAN = 0.1
TM_R_STD = 0.01
TM_OFFSET = 0.25


def _crescent(n, rng):
    a = rng.uniform(-np.pi / 2, np.pi / 2, size=n)
    r = rng.normal(TM_R_MEAN, TM_R_STD, size=n)
    return np.column_stack([r * np.cos(a) + TM_OFFSET, r * np.sin(a)])


def two_moons(x_o=None) -> Task:
    prior = priors.BoxUniform([-1.0, -1.0], [1.0, 1.0])
    if x_o is None:
        x_o = np.zeros(2)
    x_o = np.asarray(x_o, dtype=np.float64)

    def simulate(theta, rng):
        theta = np.atleast_2d(theta)
        p = _crescent(len(theta), rng)
        s = theta[:, 0] + theta[:, 1]
        t = theta[:, 1] - theta[:, 0]
        x = p + np.column_stack([-np.abs(s) / np.sqrt(2), t / np.sqrt(2)])
        return x, np.ones(len(theta), dtype=bool)

    def oracle_sample(n, rng):
        """Exact posterior draws via the known inverse structure: invert the
        crescent point for |theta1+theta2| and theta2-theta1, pick the sign
        uniformly, reject outside the prior box."""
        out = np.empty((0, 2))
        while len(out) < n:
            m = max(4 * (n - len(out)), 1024)
            p = _crescent(m, rng)
            s_abs = np.sqrt(2) * (p[:, 0] - x_o[0])
            t = np.sqrt(2) * (x_o[1] - p[:, 1])
            ok = s_abs >= 0
            sign = np.where(rng.random(m) < 0.5, 1.0, -1.0)
            s = sign * s_abs
            theta = np.column_stack([(s - t) / 2, (s + t) / 2])
            ok &= np.all(np.abs(theta) <= 1.0, axis=1)
            out = np.concatenate([out, theta[ok]], axis=0)
        return out[:n]

    return Task(
        name="two_moons",
        prior=prior,
        d_theta=2,
        d_x=2,
        simulate=simulate,
        x_o=x_o,
        oracle=SamplerOracle(oracle_sample),
        posterior_family="rqs",
    )


def two_moons_mode_regions():
    """The two posterior branches for a symmetric observation: half-planes
    split by theta1 + theta2 = 0."""
    return [lambda th: th[:, 0] + th[:, 1] > 0.0,
            lambda th: th[:, 0] + th[:, 1] < 0.0]


# invalid-data Gaussian: x12 ~ N(theta, I) plus an observable validity
# score x3 = kappa*theta1 + offset + noise; the simulation is valid iff
# x3 > 0. Validity is a deterministic function of the output (as with
# undefined summary statistics in real simulators), so a surrogate
# trained on valid records only converges to p(x|theta)/P(valid|theta)
# and the correction network has something real to cancel. The posterior
# stays fully conjugate because x3 is one more Gaussian observation.
def invalid_gaussian(kappa: float = 2.0, offset: float = 0.0, x_o=None) -> Task:
    from scipy.stats import norm

    prior = priors.Normal([0.0, 0.0], [1.0, 1.0])
    if x_o is None:
        x_o = np.array([0.0, 0.0, 0.5])
    x_o = np.asarray(x_o, dtype=np.float64)
    if x_o[2] <= 0:
        raise ValueError("the reference observation must itself be valid (x3 > 0)")

    # theta1 sees two observations (x1 and the score), theta2 one
    prec1 = 2.0 + kappa**2
    post_mean = np.array([(x_o[0] + kappa * (x_o[2] - offset)) / prec1,
                          x_o[1] / 2.0])
    post_cov = np.diag([1.0 / prec1, 0.5])

    def validity_prob(theta):
        theta = np.atleast_2d(theta)
        return norm.cdf(kappa * theta[:, 0] + offset)

    def simulate(theta, rng):
        theta = np.atleast_2d(theta)
        eps = rng.standard_normal((len(theta), 3))
        x = np.column_stack([theta + eps[:, :2],
                             kappa * theta[:, 0] + offset + eps[:, 2]])
        valid = x[:, 2] > 0
        return x, valid

    def true_log_likelihood(x, theta):
        x = np.atleast_2d(x)
        theta = np.atleast_2d(theta)
        resid = np.column_stack([x[:, 0] - theta[:, 0], x[:, 1] - theta[:, 1],
                                 x[:, 2] - kappa * theta[:, 0] - offset])
        return -0.5 * np.sum(resid**2, axis=1) - 1.5 * np.log(2 * np.pi)

    task = Task(
        name="invalid_gaussian",
        prior=prior,
        d_theta=2,
        d_x=3,
        simulate=simulate,
        x_o=x_o,
        oracle=AnalyticGaussianOracle(post_mean, post_cov),
        posterior_family="affine",
        true_log_likelihood=true_log_likelihood,
    )
    task.validity_prob = validity_prob
    task.kappa = kappa
    return task
