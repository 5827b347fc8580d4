"""Variational objectives and gradient estimators.

Four ways to fit q to an unnormalized log potential:

- rKL / ELBO: reparameterized, mode-seeking.
- fKL: self-normalized importance sampling with the current q as
  proposal. Sampling is fully detached; only the gradient of log q at the
  (constant) samples survives, weighted by the normalized importance
  weights. This is what keeps the gradient alive when q is far from the
  target, unlike the naive w*log(w) bound (kept here as a diagnostic).
- IW-ELBO: K-sample log-mean weights per outer draw.
- Renyi alpha: power-scaled weights, mass-covering for alpha < 1.

The reparameterized estimators optionally use the Sticking-the-Landing
trick: the density term is re-evaluated with frozen parameters so only
the sample path carries gradient.

All weight arithmetic happens in log space; normalized weights come from
a max-shifted softmax, so potentials may be unnormalized and arbitrarily
shifted.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import ndiff as nd
from .rng import substream

LOG_2PI = float(np.log(2.0 * np.pi))


class PotentialUnreachableError(nd.ContractError):
    """Every proposal sample had -inf potential."""


@dataclass
class VariationalObjective:
    kind: str = "fkl"  # rkl | fkl | iwelbo | renyi
    n_particles: int = 256
    k: int = 8  # iwelbo inner sample count; outer = n_particles // k
    alpha: float = 0.1
    stl: bool = False
    lr: float = 1e-2

    def validate(self):
        if self.kind not in ("rkl", "fkl", "iwelbo", "renyi"):
            raise nd.ContractError(f"unknown objective kind {self.kind!r}")
        if self.n_particles < 2:
            raise nd.ContractError("need at least 2 particles")
        if self.kind == "iwelbo":
            if self.k < 1 or self.n_particles % self.k != 0:
                raise nd.ContractError(
                    f"iwelbo needs n_particles divisible by k, got "
                    f"{self.n_particles} and {self.k}")
        if self.kind == "renyi" and self.alpha == 1.0:
            raise nd.ContractError(
                "alpha=1 is the rKL limit; use kind='rkl' instead")


@dataclass
class GradientEstimate:
    loss: float
    grads: dict
    ess: float = float("nan")
    max_weight: float = float("nan")
    argmax_sample: np.ndarray | None = None
    n: int = 0


def _normalized_log_weights(lw: np.ndarray):
    if np.all(np.isneginf(lw)):
        raise PotentialUnreachableError(
            "potential unreachable from proposal: all importance weights are zero")
    m = np.max(lw[np.isfinite(lw)], initial=-np.inf) if np.any(np.isfinite(lw)) \
        else np.nan
    with np.errstate(invalid="ignore"):
        w = np.exp(lw - m)
        wt = w / w.sum()
    return wt


def _weight_diagnostics(wt: np.ndarray, theta: np.ndarray):
    ess = float(1.0 / np.sum(wt**2))
    arg = int(np.argmax(wt))  # ties resolve to the lowest index
    return ess, float(wt[arg]), theta[arg].copy()


def fkl_step(q, log_potential, obj: VariationalObjective,
             rng: np.random.Generator) -> GradientEstimate:
    """Self-normalized forward-KL step with proposal pi = q.

    Samples and weights are constants; the gradient is
    -sum_i w_i * grad log q(theta_i).
    """
    n = obj.n_particles
    theta, logq = q.sample(n, rng)
    lpot = np.asarray(log_potential(theta), dtype=np.float64)
    lw = lpot - logq
    wt = _normalized_log_weights(lw)
    alive = np.isfinite(lw)  # zero-weight terms contribute exactly nothing
    loss = float(np.sum(wt[alive] * lw[alive]))  # KL estimate up to log Z

    logq_node = q.log_prob(theta, graph=True)
    surrogate = nd.neg(nd.sum(nd.mul(wt, logq_node)))
    grads, _ = nd.backward(surrogate)
    ess, max_w, arg = _weight_diagnostics(wt, theta)
    return GradientEstimate(loss=loss, grads=nd.grad_map(grads, q.store),
                            ess=ess, max_weight=max_w, argmax_sample=arg, n=n)


def _iw_core(q, log_potential, n: int, k: int, stl: bool,
             rng: np.random.Generator) -> GradientEstimate:
    theta, logq = q.sample_graph(n, rng, stl=stl)
    lw = nd.sub(log_potential(theta), logq)
    lw_vals = nd.value_of(lw)
    if np.all(np.isneginf(lw_vals)):
        raise PotentialUnreachableError(
            "potential unreachable from proposal: all importance weights are zero")
    outer = n // k
    lw_mat = nd.reshape(lw, (outer, k))
    loss_node = nd.neg(nd.mean(nd.sub(nd.logsumexp(lw_mat, axis=1), np.log(k))))
    grads, _ = nd.backward(loss_node)

    wt_rows = np.exp(lw_vals.reshape(outer, k)
                     - nd.value_of(nd.logsumexp(lw_mat, axis=1))[:, None])
    ess = float(np.mean(1.0 / np.sum(wt_rows**2, axis=1)))
    max_w = float(np.max(wt_rows))
    arg = int(np.argmax(nd.value_of(lw)))
    return GradientEstimate(loss=float(nd.value_of(loss_node)),
                            grads=nd.grad_map(grads, q.store), ess=ess,
                            max_weight=max_w,
                            argmax_sample=nd.value_of(theta)[arg].copy(), n=n)


def elbo_step(q, log_potential, obj: VariationalObjective,
              rng: np.random.Generator) -> GradientEstimate:
    """Reverse-KL step: loss = E_q[log q - log potential], reparameterized.

    Identical to the IW-ELBO with K = 1 on shared randomness, bit for bit.
    """
    return _iw_core(q, log_potential, obj.n_particles, 1, obj.stl, rng)


def iwelbo_step(q, log_potential, obj: VariationalObjective,
                rng: np.random.Generator) -> GradientEstimate:
    if obj.k < 1 or obj.n_particles % obj.k != 0:
        raise nd.ContractError("iwelbo needs n_particles divisible by k")
    return _iw_core(q, log_potential, obj.n_particles, obj.k, obj.stl, rng)


def renyi_step(q, log_potential, obj: VariationalObjective,
               rng: np.random.Generator) -> GradientEstimate:
    """Renyi bound step: loss = -1/(1-alpha) log E[(w)^(1-alpha)].

    Backprop through the power-scaled log-mean-exp yields exactly the
    alpha-normalized weighted gradient.
    """
    if obj.alpha == 1.0:
        raise nd.ContractError("alpha=1 is the rKL limit; use kind='rkl'")
    n = obj.n_particles
    one_m_alpha = 1.0 - obj.alpha
    theta, logq = q.sample_graph(n, rng, stl=obj.stl)
    lw = nd.sub(log_potential(theta), logq)
    lw_vals = nd.value_of(lw)
    if np.all(np.isneginf(lw_vals)):
        raise PotentialUnreachableError(
            "potential unreachable from proposal: all importance weights are zero")
    scaled = nd.reshape(nd.mul(one_m_alpha, lw), (1, n))
    loss_node = nd.mul(-1.0 / one_m_alpha,
                       nd.sub(nd.logsumexp(scaled, axis=1), np.log(n)))
    loss_node = nd.take(loss_node, (0,))
    grads, _ = nd.backward(loss_node)

    wt = _normalized_log_weights(one_m_alpha * lw_vals)
    ess, max_w, arg = _weight_diagnostics(wt, nd.value_of(theta))
    return GradientEstimate(loss=float(nd.value_of(loss_node)),
                            grads=nd.grad_map(grads, q.store), ess=ess,
                            max_weight=max_w, argmax_sample=arg, n=n)


def naive_fkl_step(q, log_potential, obj: VariationalObjective,
                   rng: np.random.Generator) -> GradientEstimate:
    """The unnormalized forward bound E_q[w log w], reparameterized.

    Kept as a diagnostic baseline: its gradient collapses to zero as soon
    as q drifts away from the target.
    """
    n = obj.n_particles
    theta, logq = q.sample_graph(n, rng, stl=False)
    lw = nd.sub(log_potential(theta), logq)
    loss_node = nd.mean(nd.mul(nd.exp(lw), lw))
    grads, _ = nd.backward(loss_node)
    wt = _normalized_log_weights(nd.value_of(lw))
    ess, max_w, arg = _weight_diagnostics(wt, nd.value_of(theta))
    return GradientEstimate(loss=float(nd.value_of(loss_node)),
                            grads=nd.grad_map(grads, q.store), ess=ess,
                            max_weight=max_w, argmax_sample=arg, n=n)


STEP_FNS = {
    "rkl": elbo_step,
    "fkl": fkl_step,
    "iwelbo": iwelbo_step,
    "renyi": renyi_step,
}


@dataclass
class FitSchedule:
    min_iters: int = 100
    max_iters: int = 1000
    window: int = 50
    rel_tol: float = 1e-3
    lr_half_life: int = 300  # step-count for halving the rate, floor lr/16


@dataclass
class FitReport:
    losses: list = field(default_factory=list)
    ess: list = field(default_factory=list)
    max_weights: list = field(default_factory=list)
    iterations: int = 0
    stop_reason: str = ""
    failed: bool = False
    wall_time: float = 0.0

    def to_json(self):
        return {"losses": self.losses, "ess": self.ess,
                "max_weights": self.max_weights, "iterations": self.iterations,
                "stop_reason": self.stop_reason, "failed": self.failed,
                "wall_time": self.wall_time}


def fit_posterior(q, log_potential, obj: VariationalObjective,
                  schedule: FitSchedule | None = None, seed: int = 0) -> FitReport:
    """Run objective steps with Adam until the trailing-window relative
    loss decrease falls under tolerance (never before min_iters, never past
    max_iters). Warm-starts from the incoming q; on a non-finite loss the
    parameters revert to the best seen and the report carries a failure
    flag."""
    obj.validate()
    schedule = schedule or FitSchedule()
    step_fn = STEP_FNS[obj.kind]
    report = FitReport()
    t0 = time.perf_counter()

    q.store.reset_moments()
    best_loss = np.inf
    best_params = q.store.values()
    for t in range(schedule.max_iters):
        rng = substream(seed, "vi-step", t)
        try:
            est = step_fn(q, log_potential, obj, rng)
        except PotentialUnreachableError:
            q.store.load_values(best_params)
            report.failed = True
            report.stop_reason = "potential unreachable"
            break
        if not np.isfinite(est.loss):
            q.store.load_values(best_params)
            report.failed = True
            report.stop_reason = "non-finite loss"
            break
        lr = obj.lr * max(0.5 ** (t / schedule.lr_half_life), 1.0 / 16.0)
        nd.adam_step(q.store, est.grads, lr)
        report.losses.append(est.loss)
        report.ess.append(est.ess)
        report.max_weights.append(est.max_weight)
        report.iterations = t + 1
        if est.loss < best_loss:
            best_loss = est.loss
            best_params = q.store.values()
        w = schedule.window
        if t + 1 >= max(schedule.min_iters, 2 * w):
            prev = float(np.mean(report.losses[-2 * w:-w]))
            cur = float(np.mean(report.losses[-w:]))
            rel = (prev - cur) / max(abs(prev), 1e-12)
            if rel < schedule.rel_tol:
                report.stop_reason = "converged"
                break
    if not report.stop_reason:
        report.stop_reason = "max iterations"
    report.wall_time = time.perf_counter() - t0
    return report


def snr_probe(step_fn, q, log_potential, obj: VariationalObjective,
              repeats: int, seed: int = 0) -> dict:
    """Per-parameter elementwise signal-to-noise |mean|/std over repeated
    gradient draws. Zero-variance entries map to +inf (nonzero mean) or 0,
    never NaN. Parameters are left untouched."""
    if repeats < 30:
        raise nd.ContractError(f"snr_probe needs at least 30 repeats, got {repeats}")
    stacks: dict[str, list] = {}
    for r in range(repeats):
        est = step_fn(q, log_potential, obj, substream(seed, "snr", r))
        for name, g in est.grads.items():
            stacks.setdefault(name, []).append(np.asarray(g))
    out = {}
    for name, gs in stacks.items():
        arr = np.stack(gs)
        mean = np.abs(arr.mean(axis=0))
        std = arr.std(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            snr = np.where(std > 0, mean / std,
                           np.where(mean > 0, np.inf, 0.0))
        out[name] = snr
    return out


class GaussianMeanFamily:
    """Gaussian location family N(mu, var) with mu the only parameter.

    The minimal variational model for estimator analysis: closed-form
    density, reparameterized sampling, one scalar gradient."""

    def __init__(self, mu0: float, var: float):
        self.var = float(var)
        self.d = 1
        self.store = nd.ParamStore()
        self.store.register("mu", np.array([float(mu0)]))

    @property
    def mu(self) -> float:
        return float(self.store.params["mu"].value[0])

    def _log_prob(self, theta, mu):
        z2 = nd.square(nd.sub(theta, mu))
        return nd.sub(nd.mul(-0.5 / self.var, nd.sum(z2, axis=1)),
                      0.5 * (LOG_2PI + np.log(self.var)))

    def log_prob(self, theta, graph: bool = False, frozen: bool = False):
        mu = self.store.node("mu") if (graph and not frozen) \
            else self.store.params["mu"].value
        return self._log_prob(theta, mu)

    def sample(self, n, rng):
        z = rng.standard_normal((n, 1))
        theta = self.store.params["mu"].value + np.sqrt(self.var) * z
        return theta, nd.value_of(self._log_prob(theta, self.store.params["mu"].value))

    def sample_graph(self, n, rng, stl: bool = False):
        z = nd.constant(rng.standard_normal((n, 1)))
        mu = self.store.node("mu")
        theta = nd.add(mu, nd.mul(np.sqrt(self.var), z))
        logq = self._log_prob(theta, self.store.params["mu"].value if stl else mu)
        return theta, logq
