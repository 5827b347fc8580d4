"""Variational objective estimators against the conjugate Gaussian toy.

The analysis family is N(mu, 4/5) with mu the only parameter; the target
joint has the closed-form posterior N(0.8, 0.8) and evidence
Z = N(1; 0, sqrt(5)).
"""

import numpy as np
import pytest
from scipy import stats

from snvi import ndiff as nd
from snvi.objectives import (
    FitSchedule,
    GaussianMeanFamily,
    PotentialUnreachableError,
    VariationalObjective,
    elbo_step,
    fit_posterior,
    fkl_step,
    iwelbo_step,
    naive_fkl_step,
    renyi_step,
    snr_probe,
)
from snvi.rng import substream
from snvi.tasks import gaussian_toy_log_joint

POST_MEAN, POST_VAR = 0.8, 0.8
LOG_Z = stats.norm(0, np.sqrt(5.0)).logpdf(1.0)


def target_family(mu=POST_MEAN):
    return GaussianMeanFamily(mu, POST_VAR)


def repeat_grads(step, q, obj, n_rep, seed=0):
    out = []
    for r in range(n_rep):
        est = step(q, gaussian_toy_log_joint, obj, substream(seed, "rep", r))
        out.append(est.grads["mu"][0])
    return np.asarray(out)


def assert_zero_within_3se(values, floor=1e-12):
    se = values.std(ddof=1) / np.sqrt(len(values))
    assert abs(values.mean()) < max(3 * se, floor), (values.mean(), se)


# ---------------------------------------------------------------------------
# at the optimum every estimator has statistically zero gradient


def test_fkl_uniform_weights_and_zero_gradient_at_target():
    q = target_family()
    obj = VariationalObjective(kind="fkl", n_particles=256)
    est = fkl_step(q, gaussian_toy_log_joint, obj, substream(0, "f"))
    assert est.max_weight <= 1.0 / obj.n_particles + 1e-6
    assert est.ess > 0.999 * obj.n_particles
    grads = repeat_grads(fkl_step, q, obj, 100, seed=1)
    assert_zero_within_3se(grads)


def test_elbo_loss_is_minus_log_z_at_target():
    q = target_family()
    obj = VariationalObjective(kind="rkl", n_particles=256)
    losses = []
    for r in range(100):
        est = elbo_step(q, gaussian_toy_log_joint, obj, substream(2, "e", r))
        losses.append(est.loss)
    losses = np.asarray(losses)
    se = losses.std(ddof=1) / np.sqrt(len(losses))
    assert abs(losses.mean() + LOG_Z) < max(3 * se, 1e-10)
    grads = repeat_grads(elbo_step, q, obj, 100, seed=3)
    assert_zero_within_3se(grads)


def test_iwelbo_loss_and_gradient_at_target():
    q = target_family()
    obj = VariationalObjective(kind="iwelbo", n_particles=256, k=8)
    losses = [iwelbo_step(q, gaussian_toy_log_joint, obj, substream(4, "i", r)).loss
              for r in range(100)]
    losses = np.asarray(losses)
    se = losses.std(ddof=1) / np.sqrt(len(losses))
    assert abs(losses.mean() + LOG_Z) < max(3 * se, 1e-10)
    grads = repeat_grads(iwelbo_step, q, obj, 100, seed=5)
    assert_zero_within_3se(grads)


def test_renyi_uniform_weights_and_zero_gradient_at_target():
    q = target_family()
    obj = VariationalObjective(kind="renyi", n_particles=256, alpha=0.1)
    est = renyi_step(q, gaussian_toy_log_joint, obj, substream(6, "r"))
    assert est.max_weight <= 1.0 / obj.n_particles + 1e-6
    grads = repeat_grads(renyi_step, q, obj, 100, seed=7)
    assert_zero_within_3se(grads)


def test_stl_elbo_gradient_identically_zero_at_target():
    # with frozen density parameters the per-sample rKL gradient vanishes
    # exactly at q = target, not just in expectation
    q = target_family()
    obj = VariationalObjective(kind="rkl", n_particles=256, stl=True)
    grads = repeat_grads(elbo_step, q, obj, 20, seed=8)
    assert np.max(np.abs(grads)) < 1e-12


# ---------------------------------------------------------------------------
# identities between estimators


def test_iwelbo_k1_equals_elbo_bitwise():
    q = GaussianMeanFamily(2.0, POST_VAR)
    obj_e = VariationalObjective(kind="rkl", n_particles=64)
    obj_i = VariationalObjective(kind="iwelbo", n_particles=64, k=1)
    for r in range(5):
        a = elbo_step(q, gaussian_toy_log_joint, obj_e, substream(9, "k1", r))
        b = iwelbo_step(q, gaussian_toy_log_joint, obj_i, substream(9, "k1", r))
        assert a.loss == b.loss
        assert np.array_equal(a.grads["mu"], b.grads["mu"])


def test_renyi_alpha_zero_equals_full_batch_iwelbo():
    q = GaussianMeanFamily(1.5, POST_VAR)
    obj_r = VariationalObjective(kind="renyi", n_particles=64, alpha=0.0)
    obj_i = VariationalObjective(kind="iwelbo", n_particles=64, k=64)
    a = renyi_step(q, gaussian_toy_log_joint, obj_r, substream(10, "a0"))
    b = iwelbo_step(q, gaussian_toy_log_joint, obj_i, substream(10, "a0"))
    assert np.isclose(a.loss, b.loss, rtol=1e-12)
    np.testing.assert_allclose(a.grads["mu"], b.grads["mu"], rtol=1e-9)


def test_iw_bound_monotone_in_k():
    q = GaussianMeanFamily(2.0, POST_VAR)
    loss_k = {k: [] for k in (1, 8)}
    for k in (1, 8):
        obj = VariationalObjective(kind="iwelbo", n_particles=256, k=k)
        for r in range(300):
            loss_k[k].append(
                iwelbo_step(q, gaussian_toy_log_joint, obj, substream(11, k, r)).loss)
    m1, m8 = np.mean(loss_k[1]), np.mean(loss_k[8])
    se = np.std(loss_k[1]) / np.sqrt(300) + np.std(loss_k[8]) / np.sqrt(300)
    # tighter bound => smaller loss (loss = -bound)
    assert m8 <= m1 + 3 * se


def test_normalization_constant_invariance():
    q = GaussianMeanFamily(1.7, POST_VAR)
    obj = VariationalObjective(kind="fkl", n_particles=128)

    def shifted(theta):
        return nd.add(gaussian_toy_log_joint(theta), 57.0)

    a = fkl_step(q, gaussian_toy_log_joint, obj, substream(12, "c"))
    b = fkl_step(q, shifted, obj, substream(12, "c"))
    np.testing.assert_allclose(a.grads["mu"], b.grads["mu"], atol=1e-9)
    for step, kind in ((elbo_step, "rkl"), (renyi_step, "renyi")):
        obj2 = VariationalObjective(kind=kind, n_particles=128)
        a = step(q, gaussian_toy_log_joint, obj2, substream(13, kind))
        b = step(q, shifted, obj2, substream(13, kind))
        np.testing.assert_allclose(a.grads["mu"], b.grads["mu"], atol=1e-9)


def test_renyi_weight_derivative_in_alpha():
    # d w_alpha / d alpha = w_alpha * (sum_j w_alpha_j lw_j - lw): finite
    # differences must track the analytic derivative elementwise
    rng = substream(14, "alpha")
    lw = rng.normal(size=200)

    def weights(alpha):
        s = (1 - alpha) * lw
        w = np.exp(s - s.max())
        return w / w.sum()

    for alpha in (0.1, 0.5, 0.9):
        h = 1e-6
        fd = (weights(alpha + h) - weights(alpha - h)) / (2 * h)
        w = weights(alpha)
        analytic = w * (np.sum(w * lw) - lw)
        np.testing.assert_allclose(fd, analytic, atol=1e-6)


# ---------------------------------------------------------------------------
# the vanishing-gradient story (naive vs self-normalized fKL)


def test_naive_fkl_zero_loss_at_normalized_target():
    q = target_family()
    frozen_mu = q.store.params["mu"].value.copy()

    def normalized_target(theta):
        z2 = nd.square(nd.sub(theta, frozen_mu))
        return nd.sub(nd.mul(-0.5 / POST_VAR, nd.sum(z2, axis=1)),
                      0.5 * np.log(2 * np.pi * POST_VAR))

    obj = VariationalObjective(kind="fkl", n_particles=512)
    est = naive_fkl_step(q, normalized_target, obj, substream(15, "n"))
    assert est.loss == 0.0
    grads = repeat_grads(lambda q_, p_, o_, r_: naive_fkl_step(q_, normalized_target, o_, r_),
                         q, obj, 100, seed=16)
    assert_zero_within_3se(grads)


def test_naive_fkl_gradient_vanishes_far_from_target():
    q = GaussianMeanFamily(12.0, POST_VAR)
    obj = VariationalObjective(kind="fkl", n_particles=1000)
    grads = repeat_grads(naive_fkl_step, q, obj, 50, seed=17)
    assert np.max(np.abs(grads)) < 1e-3


def test_naive_fkl_matches_true_gradient_near_target():
    # analytic gradient of E_q[w log w] for the location family:
    # Z * (mu - 0.8) / 0.8
    mu = 1.2
    q = GaussianMeanFamily(mu, POST_VAR)
    obj = VariationalObjective(kind="fkl", n_particles=4000)
    grads = repeat_grads(naive_fkl_step, q, obj, 60, seed=18)
    want = np.exp(LOG_Z) * (mu - POST_MEAN) / POST_VAR
    se = grads.std(ddof=1) / np.sqrt(len(grads))
    assert abs(grads.mean() - want) < 4 * se, (grads.mean(), want, se)


def test_self_normalized_fkl_survives_far_from_target():
    q = GaussianMeanFamily(12.0, POST_VAR)
    obj = VariationalObjective(kind="fkl", n_particles=1000)
    grads = repeat_grads(fkl_step, q, obj, 100, seed=19)
    # loss decreases toward mu* = 0.8, so the gradient must be positive
    assert np.mean(grads > 0.05) >= 0.95


def test_fkl_argmax_weight_matches_extreme_value_density():
    """For mu > mu* the weights are monotone decreasing in theta, so the
    argmax-weight draw is the sample minimum with density
    N (1 - F_q(r))^(N-1) q(r)."""
    mu, n, reps = 6.0, 1000, 400
    q = GaussianMeanFamily(mu, POST_VAR)
    obj = VariationalObjective(kind="fkl", n_particles=n)
    draws = np.array([
        fkl_step(q, gaussian_toy_log_joint, obj, substream(20, "pr", r))
        .argmax_sample[0]
        for r in range(reps)
    ])
    scale = np.sqrt(POST_VAR)

    def cdf(r):
        return 1.0 - (1.0 - stats.norm(mu, scale).cdf(r)) ** n

    p = stats.kstest(draws, cdf).pvalue
    assert p > 0.01, p


# ---------------------------------------------------------------------------
# fitting loop


@pytest.mark.parametrize("kind,start,stl,tol", [
    ("fkl", 3.0, False, 0.05),
    ("rkl", 3.0, False, 0.05),
    ("iwelbo", 3.0, True, 0.05),
    ("renyi", 1.5, True, 0.05),  # alpha-weights need a warm-ish start
])
def test_fit_posterior_converges_on_gaussian_target(kind, start, stl, tol):
    q = GaussianMeanFamily(start, POST_VAR)
    obj = VariationalObjective(kind=kind, n_particles=256, stl=stl)
    for round_seed in (21, 22):  # two warm-started rounds, as in the loop
        report = fit_posterior(q, gaussian_toy_log_joint, obj, FitSchedule(),
                               seed=round_seed)
        assert not report.failed
        assert report.iterations >= 100
    assert abs(q.mu - POST_MEAN) < tol, q.mu


def test_elbo_flow_converges_to_conjugate_moments():
    # a 1-layer affine flow in 1-d is exactly the Gaussian family; its
    # composed shift/scale are read off the base-space map exactly
    from snvi.flows import TransformSpec, make_flow

    q = make_flow(TransformSpec(family="affine", layers=1, hidden=(8,)), 1, seed=5)
    obj = VariationalObjective(kind="rkl", n_particles=256, stl=True)
    for round_seed in (30, 31):  # up to 2000 steps in total
        fit_posterior(q, gaussian_toy_log_joint, obj, FitSchedule(), seed=round_seed)
    mean = q.from_base(np.zeros((1, 1)))[0][0, 0]
    scale = q.from_base(np.ones((1, 1)))[0][0, 0] - mean
    assert abs(mean - POST_MEAN) < 1e-2
    assert abs(scale**2 - POST_VAR) < 1e-2


def test_fit_posterior_flow_matches_prior_target():
    from snvi.flows import TransformSpec, make_flow
    from snvi.metrics import c2st
    from snvi.priors import Normal

    prior = Normal([0.0], [2.0])
    q = make_flow(TransformSpec(family="affine", layers=2, hidden=(10,)), 1, seed=3)
    obj = VariationalObjective(kind="fkl", n_particles=256, lr=5e-3)
    report = fit_posterior(q, prior.log_prob, obj, FitSchedule(), seed=22)
    assert not report.failed
    flow_samples, _ = q.sample(2000, substream(23, "fp"))
    prior_samples = prior.sample(2000, substream(24, "fp"))
    assert c2st(flow_samples, prior_samples).accuracy < 0.55


def test_fit_posterior_divergence_reverts_and_flags():
    q = GaussianMeanFamily(1.0, POST_VAR)
    calls = {"n": 0}

    def fragile(theta):
        calls["n"] += 1
        if calls["n"] > 30:
            return nd.mul(np.nan, nd.sum(theta, axis=1))
        return gaussian_toy_log_joint(theta)

    obj = VariationalObjective(kind="rkl", n_particles=32)
    report = fit_posterior(q, fragile, obj, FitSchedule(min_iters=10), seed=25)
    assert report.failed
    assert report.stop_reason == "non-finite loss"
    assert np.isfinite(q.mu)


def test_fkl_unreachable_potential_raises():
    q = target_family()

    def impossible(theta):
        return np.full(len(nd.value_of(theta)), -np.inf)

    obj = VariationalObjective(kind="fkl", n_particles=32)
    with pytest.raises(PotentialUnreachableError):
        fkl_step(q, impossible, obj, substream(26, "u"))


def test_objective_validation():
    with pytest.raises(nd.ContractError):
        VariationalObjective(kind="nope").validate()
    with pytest.raises(nd.ContractError):
        VariationalObjective(kind="iwelbo", n_particles=10, k=3).validate()
    with pytest.raises(nd.ContractError):
        VariationalObjective(kind="renyi", alpha=1.0).validate()
    with pytest.raises(nd.ContractError):
        VariationalObjective(n_particles=1).validate()


# ---------------------------------------------------------------------------
# SNR probes


def test_snr_probe_contract_and_finiteness():
    q = GaussianMeanFamily(2.0, POST_VAR)
    obj = VariationalObjective(kind="fkl", n_particles=64)
    with pytest.raises(nd.ContractError):
        snr_probe(fkl_step, q, gaussian_toy_log_joint, obj, repeats=5)
    snr = snr_probe(fkl_step, q, gaussian_toy_log_joint, obj, repeats=40, seed=27)
    assert not np.any(np.isnan(snr["mu"]))
    assert q.mu == 2.0  # probing must not move parameters


def test_snr_probe_deterministic_gradient_no_nan():
    q = GaussianMeanFamily(0.8, POST_VAR)
    obj = VariationalObjective(kind="rkl", n_particles=16)

    def constant_step(q_, pot_, obj_, rng_):
        from snvi.objectives import GradientEstimate
        return GradientEstimate(loss=1.0, grads={"mu": np.array([0.25])}, n=16)

    snr = snr_probe(constant_step, q, gaussian_toy_log_joint, obj,
                    repeats=30, seed=28)
    assert snr["mu"][0] == np.inf  # zero variance, nonzero mean: defined

    def zero_step(q_, pot_, obj_, rng_):
        from snvi.objectives import GradientEstimate
        return GradientEstimate(loss=0.0, grads={"mu": np.zeros(1)}, n=16)

    snr = snr_probe(zero_step, q, gaussian_toy_log_joint, obj,
                    repeats=30, seed=28)
    assert snr["mu"][0] == 0.0  # zero variance, zero mean: defined, no NaN


def test_self_normalized_fkl_beats_naive_snr_far_out():
    q = GaussianMeanFamily(12.0, POST_VAR)
    obj = VariationalObjective(kind="fkl", n_particles=1000)
    snr_self = snr_probe(fkl_step, q, gaussian_toy_log_joint, obj,
                         repeats=60, seed=29)["mu"][0]
    snr_naive = snr_probe(naive_fkl_step, q, gaussian_toy_log_joint, obj,
                          repeats=60, seed=30)["mu"][0]
    assert snr_self > snr_naive


def test_stl_improves_iwelbo_snr_near_optimum():
    q = GaussianMeanFamily(0.85, POST_VAR)
    base = VariationalObjective(kind="iwelbo", n_particles=256, k=8, stl=False)
    stl = VariationalObjective(kind="iwelbo", n_particles=256, k=8, stl=True)
    snr_base = snr_probe(iwelbo_step, q, gaussian_toy_log_joint, base,
                         repeats=60, seed=31)["mu"][0]
    snr_stl = snr_probe(iwelbo_step, q, gaussian_toy_log_joint, stl,
                        repeats=60, seed=31)["mu"][0]
    assert snr_stl >= snr_base
