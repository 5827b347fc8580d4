"""Task simulators, reference likelihoods, and oracle correctness."""

import numpy as np
import pytest
from scipy import stats

from snvi.ndiff import ContractError
from snvi.rng import substream
from snvi.tasks import (
    bernoulli_glm,
    gaussian_toy,
    get_task,
    glm_log_likelihood,
    invalid_gaussian,
    lotka_volterra,
    lv_integrate,
    slcp,
    slcp_log_likelihood,
    two_moons,
    two_moons_mode_regions,
)
from snvi.tasks.toys import TM_OFFSET, TM_R_MEAN, TM_R_STD


# --- gaussian toy -----------------------------------------------------------


def test_gaussian_toy_oracle_moments():
    task = gaussian_toy()
    s = task.oracle.sample(100_000, substream(0, "gt"))
    assert abs(s.mean() - 0.8) < 0.02
    assert abs(s.var() - 0.8) < 0.03


def test_gaussian_toy_simulator_and_prior():
    task = gaussian_toy()
    x, valid = task.simulate(np.zeros((100_000, 1)), substream(1, "gt"))
    assert valid.all()
    assert abs(x.mean()) < 0.02
    draws = task.prior.sample(100_000, substream(2, "gt"))
    assert abs(draws.var() - 4.0) < 0.2


# --- two moons ---------------------------------------------------------------


def test_two_moons_forward_band():
    task = two_moons()
    x, valid = task.simulate(np.zeros((20_000, 2)), substream(3, "tm"))
    assert valid.all()
    # crescent first coordinate: r*cos(a) + 0.25 with r ~ N(0.1, 0.01)
    assert np.all(x[:, 0] > TM_OFFSET - 5 * TM_R_STD)
    assert np.all(x[:, 0] < TM_OFFSET + TM_R_MEAN + 6 * TM_R_STD)
    assert np.all(np.abs(x[:, 1]) < TM_R_MEAN + 6 * TM_R_STD)


def _crescent_logpdf(p):
    """Analytic density of the crescent noise point (polar change of
    variables: uniform angle on a half circle, Gaussian radius)."""
    dx = p[:, 0] - TM_OFFSET
    dy = p[:, 1]
    r = np.sqrt(dx**2 + dy**2)
    out = np.full(len(p), -np.inf)
    ok = (dx > 0) & (r > 1e-12)
    out[ok] = (stats.norm(TM_R_MEAN, TM_R_STD).logpdf(r[ok])
               - np.log(np.pi) - np.log(r[ok]))
    return out


def test_two_moons_oracle_matches_analytic_density():
    """Marginal CDFs of oracle draws vs the closed-form posterior density
    integrated on a fine grid over one branch (s > 0)."""
    task = two_moons()
    samples = task.oracle.sample(100_000, substream(4, "tm"))
    s = samples[:, 0] + samples[:, 1]
    t = samples[:, 1] - samples[:, 0]
    pos = s > 0
    assert 0.45 < pos.mean() < 0.55

    gs = np.linspace(0.2, 0.9, 1400)
    gt = np.linspace(-0.35, 0.35, 1400)
    ms, mt = np.meshgrid(gs, gt, indexing="ij")
    p = np.column_stack([task.x_o[0] + ms.ravel() / np.sqrt(2),
                         task.x_o[1] - mt.ravel() / np.sqrt(2)])
    dens = np.exp(_crescent_logpdf(p)).reshape(ms.shape)
    for axis, grid, draws in ((1, gs, s[pos]), (0, gt, t[pos])):
        marg = dens.sum(axis=axis)
        cdf = np.cumsum(marg) / marg.sum()
        emp = np.searchsorted(np.sort(draws), grid) / len(draws)
        assert np.max(np.abs(emp - cdf)) < 0.01


def test_two_moons_oracle_mode_symmetry():
    task = two_moons()
    samples = task.oracle.sample(10_000, substream(5, "tm"))
    masses = np.array(
        [np.mean(r(samples)) for r in two_moons_mode_regions()])
    np.testing.assert_allclose(masses, 0.5, atol=0.03)
    assert np.all(np.abs(samples) <= 1.0)


# --- SLCP ---------------------------------------------------------------------


def test_slcp_log_likelihood_matches_scipy():
    task = slcp()
    rng = substream(6, "slcp")
    theta = task.prior.sample(20, rng)
    x, _ = task.simulate(theta, rng)
    got = slcp_log_likelihood(x, theta)
    for i in range(20):
        m = theta[i, :2]
        s1, s2 = theta[i, 2] ** 2, theta[i, 3] ** 2
        rho = np.tanh(theta[i, 4])
        cov = np.array([[s1**2 + 1e-6, rho * s1 * s2],
                        [rho * s1 * s2, s2**2 + 1e-6]])
        want = sum(stats.multivariate_normal(m, cov).logpdf(x[i, 2 * r:2 * r + 2])
                   for r in range(4))
        assert np.isclose(got[i], want, rtol=1e-8), i


def test_slcp_sign_flip_symmetry():
    task = slcp()
    rng = substream(7, "slcp")
    theta = task.prior.sample(50, rng)
    x = np.repeat(task.x_o[None, :], 50, axis=0)
    base = slcp_log_likelihood(x, theta)
    for j in (2, 3):
        flipped = theta.copy()
        flipped[:, j] = -flipped[:, j]
        np.testing.assert_allclose(slcp_log_likelihood(x, flipped), base, rtol=1e-12)


def test_slcp_simulator_moments():
    theta = np.array([[0.5, -0.5, 1.2, 0.8, 0.3]])
    task = slcp()
    x, _ = task.simulate(np.repeat(theta, 100_000, axis=0), substream(8, "slcp"))
    pairs = x.reshape(-1, 2)
    s1, s2 = 1.2**2, 0.8**2
    rho = np.tanh(0.3)
    np.testing.assert_allclose(pairs.mean(axis=0), [0.5, -0.5], atol=0.02)
    np.testing.assert_allclose(
        np.cov(pairs.T),
        [[s1**2, rho * s1 * s2], [rho * s1 * s2, s2**2]], atol=0.03)


# --- Bernoulli GLM -------------------------------------------------------------


def test_glm_zero_weights_spike_rate():
    task = bernoulli_glm()
    theta = np.zeros((1, 10))
    theta[0, 0] = 0.7
    reps = np.repeat(theta, 2000, axis=0)
    stats_x, valid = task.simulate(reps, substream(9, "glm"))
    assert valid.all()
    assert stats_x.shape[1] == 10
    rate = stats_x[:, 0].mean() / 100.0
    assert abs(rate - 1.0 / (1.0 + np.exp(-0.7))) < 0.01


def test_glm_log_likelihood_matches_direct_bernoulli():
    task = bernoulli_glm()
    rng = substream(10, "glm")
    theta = task.prior.sample(5, rng)
    y = (rng.random((5, 100)) < 0.4).astype(float)
    got = glm_log_likelihood(y, theta, task.design)
    eta = theta[:, :1] + theta[:, 1:] @ task.design.T
    p = 1.0 / (1.0 + np.exp(-eta))
    want = np.sum(y * np.log(p) + (1 - y) * np.log1p(-p), axis=1)
    np.testing.assert_allclose(got, want, rtol=1e-10)


# --- Lotka-Volterra -------------------------------------------------------------


def test_lv_decoupled_rates_match_analytic_ode():
    theta = np.array([[0.4, 0.0, 0.3, 0.0]])
    traj, ok = lv_integrate(theta)
    assert ok[0]
    times = np.arange(2.0, 22.0, 2.0)
    prey = 30.0 * np.exp(0.4 * times)
    pred = 1.0 * np.exp(-0.3 * times)
    np.testing.assert_allclose(traj[0, :, 0] / prey, 1.0, atol=1e-4)
    np.testing.assert_allclose(traj[0, :, 1] / np.maximum(pred, 1e-12), 1.0, atol=1e-4)


def test_lv_equilibrium_is_fixed_point():
    alpha, beta, gamma, delta = 0.9, 0.05, 0.8, 0.04
    theta = np.array([[alpha, beta, gamma, delta]])
    # equilibrium: prey = gamma/delta, predator = alpha/beta
    import snvi.tasks.benchmarks as bm
    old = bm.LV_X0.copy()
    bm.LV_X0[:] = [gamma / delta, alpha / beta]
    try:
        traj, ok = lv_integrate(theta)
    finally:
        bm.LV_X0[:] = old
    assert ok[0]
    assert np.max(np.abs(traj[0, :, 0] - gamma / delta)) < 1e-6
    assert np.max(np.abs(traj[0, :, 1] - alpha / beta)) < 1e-6


def test_lv_stress_sweep_marks_invalid_without_nan_poisoning():
    task = lotka_volterra()
    corners = np.array([
        [3.0, 1e-4, 1e-3, 2.0],
        [2.5, 1e-4, 1e-3, 1.5],
        [0.9, 0.05, 0.8, 0.04],
    ])
    x, valid = task.simulate(corners, substream(11, "lv"))
    assert np.all(np.isfinite(x[valid]))
    assert not valid.all()  # the explosive corners must be flagged


def test_lv_reference_observation_is_valid():
    task = lotka_volterra()
    assert np.all(np.isfinite(task.x_o)) and task.d_x == 20


# --- invalid gaussian -----------------------------------------------------------


def test_invalid_gaussian_validity_rates():
    task0 = invalid_gaussian(kappa=0.0)
    theta = task0.prior.sample(100_000, substream(12, "ig"))
    _, valid = task0.simulate(theta, substream(13, "ig"))
    assert abs(valid.mean() - 0.5) < 0.01

    task2 = invalid_gaussian(kappa=2.0)
    theta = task2.prior.sample(100_000, substream(14, "ig"))
    _, valid = task2.simulate(theta, substream(15, "ig"))
    want = task2.validity_prob(theta).mean()
    assert abs(valid.mean() - want) < 0.02
    # validity is a deterministic function of the output, not a coin
    x, v = task2.simulate(theta[:1000], substream(15, "ig"))
    np.testing.assert_array_equal(v, x[:, 2] > 0)


def test_invalid_gaussian_oracle_is_conjugate_posterior():
    task = invalid_gaussian(kappa=2.0)  # x_o = (0, 0, 0.5)
    s = task.oracle.sample(200_000, substream(16, "ig"))
    want_mean = np.array([(0.0 + 2.0 * 0.5) / 6.0, 0.0])
    np.testing.assert_allclose(s.mean(axis=0), want_mean, atol=0.02)
    np.testing.assert_allclose(np.cov(s.T), np.diag([1 / 6, 0.5]), atol=0.02)


def test_invalid_gaussian_population_bias_of_valid_only_surrogate():
    """Quadrature oracle for the uncorrected potential: tilting the true
    posterior by 1/P(valid|theta1) must shift the theta1 mean by > 0.1
    towards low validity; this is what the calibration net cancels."""
    from scipy.stats import norm

    task = invalid_gaussian(kappa=2.0)
    grid = np.linspace(-4, 4, 20_001)
    post = norm(task.oracle.mean[0], np.sqrt(task.oracle.cov[0, 0])).pdf(grid)
    tilted = post / norm.cdf(2.0 * grid)
    tilted /= np.trapezoid(tilted, grid)
    biased_mean = np.trapezoid(grid * tilted, grid)
    assert biased_mean - task.oracle.mean[0] < -0.1


# --- registry / determinism ------------------------------------------------------


def test_simulators_deterministic_given_substream():
    for name in ("gaussian_toy", "two_moons", "slcp", "bernoulli_glm",
                 "lotka_volterra", "invalid_gaussian"):
        task = get_task(name)
        theta = task.prior.sample(16, substream(17, name))
        xa, va = task.simulate(theta, substream(18, name))
        xb, vb = task.simulate(theta, substream(18, name))
        with np.errstate(invalid="ignore"):
            assert np.array_equal(xa, xb, equal_nan=True) and np.array_equal(va, vb)


def test_get_task_observation_variation():
    a = get_task("two_moons", obs_seed=1)
    b = get_task("two_moons", obs_seed=2)
    assert not np.allclose(a.x_o, b.x_o)
    assert hasattr(a, "theta_star")


def test_get_task_unknown_name():
    with pytest.raises(ContractError):
        get_task("nope")


def test_glm_oracle_unimodal_across_restarts():
    """The GLM posterior is unimodal and concave: independent MCMC
    restarts agree on the mean."""
    task = bernoulli_glm()
    means = [task.oracle.sample(800, substream(s, "glm-oracle")).mean(axis=0)
             for s in (30, 31)]
    assert np.max(np.abs(means[0] - means[1])) < 0.15


def test_lv_oracle_samples_positive_and_near_truth():
    task = lotka_volterra()
    samples = task.oracle.sample(600, substream(32, "lv-oracle"))
    assert np.all(samples > 0) and np.all(np.isfinite(samples))
    # posterior concentrates around the generating rates at sigma=0.1 noise
    assert np.max(np.abs(np.log(samples.mean(axis=0)) - np.log(task.theta_star))) < 0.5


def test_mcmc_oracle_moments_stable_across_seeds():
    task = slcp()
    a = task.oracle.sample(6000, substream(20, "oracle"))
    b = task.oracle.sample(6000, substream(21, "oracle"))
    # symmetric dims have mean 0; compare absolute-moment stability instead
    np.testing.assert_allclose(np.abs(a).mean(axis=0), np.abs(b).mean(axis=0),
                               atol=0.05)
    np.testing.assert_allclose(a.mean(axis=0)[:2], b.mean(axis=0)[:2], atol=0.05)
