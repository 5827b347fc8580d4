"""Benchmark simulators with tractable reference likelihoods: SLCP,
Bernoulli GLM, and an ODE Lotka-Volterra variant.

Noise and prior constants follow the conventional benchmark values and
are centralized here.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .. import priors
from ..rng import substream
from .base import McmcOracle, Task

# --- SLCP ------------------------------------------------------------------

SLCP_BOUND = 3.0
SLCP_REPEATS = 4
SLCP_JITTER = 1e-6


def _slcp_moments(theta):
    theta = np.atleast_2d(theta)
    m = theta[:, :2]
    s1 = theta[:, 2] ** 2
    s2 = theta[:, 3] ** 2
    rho = np.tanh(theta[:, 4])
    c11 = s1 ** 2 + SLCP_JITTER
    c22 = s2 ** 2 + SLCP_JITTER
    c12 = rho * s1 * s2
    return m, c11, c12, c22


def _pair_obs(x, theta):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    if len(x) == 1 and len(theta) > 1:
        x = np.broadcast_to(x, (len(theta), x.shape[1]))
    return x, theta


def slcp_log_likelihood(x, theta):
    """Sum of four bivariate-normal log densities, in closed form."""
    x, theta = _pair_obs(x, theta)
    m, c11, c12, c22 = _slcp_moments(theta)
    det = c11 * c22 - c12 ** 2
    out = np.zeros(max(len(x), len(theta)))
    for r in range(SLCP_REPEATS):
        dx = x[:, 2 * r] - m[:, 0]
        dy = x[:, 2 * r + 1] - m[:, 1]
        quad = (c22 * dx ** 2 - 2 * c12 * dx * dy + c11 * dy ** 2) / det
        out += -0.5 * quad - 0.5 * np.log(det) - np.log(2 * np.pi)
    return out


def slcp(obs_seed: int | None = None) -> Task:
    prior = priors.BoxUniform(np.full(5, -SLCP_BOUND), np.full(5, SLCP_BOUND))

    def simulate(theta, rng):
        theta = np.atleast_2d(theta)
        n = len(theta)
        m, c11, c12, c22 = _slcp_moments(theta)
        a = np.sqrt(c11)
        b = c12 / a
        c = np.sqrt(np.maximum(c22 - b ** 2, SLCP_JITTER * 0.5))
        x = np.empty((n, 2 * SLCP_REPEATS))
        for r in range(SLCP_REPEATS):
            z = rng.standard_normal((n, 2))
            x[:, 2 * r] = m[:, 0] + a * z[:, 0]
            x[:, 2 * r + 1] = m[:, 1] + b * z[:, 0] + c * z[:, 1]
        return x, np.ones(n, dtype=bool)

    rng_obs = substream(0 if obs_seed is None else obs_seed, "slcp-obs")
    theta_star = prior.sample(1, rng_obs)[0]
    x_o, _ = simulate(theta_star[None, :], rng_obs)
    x_o = x_o[0]

    task = Task(
        name="slcp",
        prior=prior,
        d_theta=5,
        d_x=2 * SLCP_REPEATS,
        simulate=simulate,
        x_o=x_o,
        oracle=McmcOracle(prior, lambda th: slcp_log_likelihood(x_o[None, :], th)),
        posterior_family="rqs",
        true_log_likelihood=slcp_log_likelihood,
    )
    task.theta_star = theta_star
    return task


# --- Bernoulli GLM -----------------------------------------------------------

GLM_BINS = 100
GLM_TAPS = 9
GLM_OFFSET_STD = np.sqrt(2.0)
GLM_SMOOTH_LENGTH = 2.0


def _glm_design():
    rng = substream(0, "glm-design")
    stim = rng.standard_normal(GLM_BINS + GLM_TAPS - 1)
    return np.stack([stim[t:t + GLM_TAPS] for t in range(GLM_BINS)])


def _glm_prior():
    idx = np.arange(GLM_TAPS)
    k = np.exp(-0.5 * ((idx[:, None] - idx[None, :]) / GLM_SMOOTH_LENGTH) ** 2)
    cov = np.zeros((GLM_TAPS + 1, GLM_TAPS + 1))
    cov[0, 0] = GLM_OFFSET_STD ** 2
    cov[1:, 1:] = k + 1e-6 * np.eye(GLM_TAPS)
    return priors.MultivariateNormal(np.zeros(GLM_TAPS + 1), cov)


def glm_summary(y, design):
    """The 10 sufficient statistics: total spike count and the
    spike-triggered stimulus sums."""
    y = np.atleast_2d(y)
    return np.concatenate([y.sum(axis=1, keepdims=True), y @ design], axis=1)


def glm_log_likelihood(y, theta, design):
    y, theta = _pair_obs(y, theta)
    eta = theta[:, :1] + theta[:, 1:] @ design.T
    return -np.sum(y * np.logaddexp(0.0, -eta) + (1 - y) * np.logaddexp(0.0, eta),
                   axis=1)


def bernoulli_glm(obs_seed: int | None = None) -> Task:
    design = _glm_design()
    prior = _glm_prior()

    def simulate(theta, rng):
        theta = np.atleast_2d(theta)
        eta = theta[:, :1] + theta[:, 1:] @ design.T
        y = (rng.random(eta.shape) < expit(eta)).astype(np.float64)
        return glm_summary(y, design), np.ones(len(theta), dtype=bool)

    rng_obs = substream(0 if obs_seed is None else obs_seed, "glm-obs")
    theta_star = prior.sample(1, rng_obs)[0]
    eta = theta_star[0] + design @ theta_star[1:]
    y_o = (rng_obs.random(GLM_BINS) < expit(eta)).astype(np.float64)
    x_o = glm_summary(y_o, design)[0]

    task = Task(
        name="bernoulli_glm",
        prior=prior,
        d_theta=GLM_TAPS + 1,
        d_x=GLM_TAPS + 1,
        simulate=simulate,
        x_o=x_o,
        oracle=McmcOracle(prior,
                          lambda th: glm_log_likelihood(y_o[None, :], th, design)),
        posterior_family="affine",
    )
    task.design = design
    task.y_o = y_o
    task.theta_star = theta_star
    return task


# --- Lotka-Volterra (ODE variant) -------------------------------------------

LV_PRIOR_MU = np.array([-0.125, -3.0, -0.125, -3.0])
LV_PRIOR_SIGMA = 0.5
LV_X0 = np.array([30.0, 1.0])
LV_DT = 0.1
LV_HORIZON = 20.0
LV_OBS_TIMES = np.arange(2.0, 22.0, 2.0)
LV_NOISE = 0.1
LV_CAP = 1e6


def lv_integrate(theta):
    """RK4 trajectories of the predator-prey ODE at the observation times.

    Returns (traj [n, 10, 2], ok [n]) where ok flags finite positive
    populations along the whole path.
    """
    theta = np.atleast_2d(theta)
    n = len(theta)
    alpha, beta, gamma, delta = theta.T
    state = np.tile(LV_X0, (n, 1))
    ok = np.ones(n, dtype=bool)
    steps = int(round(LV_HORIZON / LV_DT))
    obs_idx = np.round(LV_OBS_TIMES / LV_DT).astype(int)
    traj = np.zeros((n, len(LV_OBS_TIMES), 2))
    next_obs = 0

    def deriv(s):
        x, y = s[:, 0], s[:, 1]
        return np.column_stack([alpha * x - beta * x * y,
                                -gamma * y + delta * x * y])

    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, steps + 1):
            k1 = deriv(state)
            k2 = deriv(state + 0.5 * LV_DT * k1)
            k3 = deriv(state + 0.5 * LV_DT * k2)
            k4 = deriv(state + LV_DT * k3)
            state = state + (LV_DT / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            bad = (~np.isfinite(state).all(axis=1)) | (state <= 0).any(axis=1) \
                | (state > LV_CAP).any(axis=1)
            ok &= ~bad
            state[bad] = 1.0  # keep the integration finite; rows stay flagged
            if next_obs < len(obs_idx) and step == obs_idx[next_obs]:
                traj[:, next_obs, :] = state
                next_obs += 1
    return traj, ok


def lv_log_likelihood(x, theta):
    """Lognormal observation density around the deterministic trajectory."""
    x, theta = _pair_obs(x, theta)
    traj, ok = lv_integrate(theta)
    m = traj.reshape(len(theta), -1)
    out = np.full(max(len(x), len(theta)), -np.inf)
    good = ok & np.all(m > 0, axis=1) & np.all(x > 0, axis=1)
    if np.any(good):
        lx = np.log(x[good])
        lm = np.log(m[good])
        out[good] = np.sum(
            -0.5 * ((lx - lm) / LV_NOISE) ** 2
            - np.log(LV_NOISE) - 0.5 * np.log(2 * np.pi) - lx, axis=1)
    return out


def lotka_volterra(obs_seed: int | None = None) -> Task:
    prior = priors.LogNormal(LV_PRIOR_MU, LV_PRIOR_SIGMA)

    def simulate(theta, rng):
        theta = np.atleast_2d(theta)
        traj, ok = lv_integrate(theta)
        m = traj.reshape(len(theta), -1)
        noise = rng.standard_normal(m.shape)
        with np.errstate(invalid="ignore", divide="ignore"):
            x = np.where(ok[:, None] & (m > 0),
                         np.exp(np.log(np.maximum(m, 1e-300)) + LV_NOISE * noise),
                         np.nan)
        valid = ok & np.all(np.isfinite(x), axis=1)
        return x, valid

    if obs_seed is None:
        theta_star = np.exp(LV_PRIOR_MU)  # prior median; stable oscillation
        rng_obs = substream(0, "lv-obs")
    else:
        rng_obs = substream(obs_seed, "lv-obs")
        theta_star = prior.sample(1, rng_obs)[0]
    x_o, valid = simulate(theta_star[None, :], rng_obs)
    for _ in range(100):
        if valid[0]:
            break
        theta_star = prior.sample(1, rng_obs)[0]
        x_o, valid = simulate(theta_star[None, :], rng_obs)
    x_o = x_o[0]

    task = Task(
        name="lotka_volterra",
        prior=prior,
        d_theta=4,
        d_x=2 * len(LV_OBS_TIMES),
        simulate=simulate,
        x_o=x_o,
        oracle=McmcOracle(prior, lambda th: lv_log_likelihood(x_o[None, :], th)),
        posterior_family="affine",
    )
    task.theta_star = theta_star
    return task
