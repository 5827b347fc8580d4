"""The sequential inference driver.

Rounds of propose -> simulate -> retrain surrogate (and calibration net)
-> refit the variational posterior -> update the proposal. The posterior
object that comes out bundles the fitted flow, the final potential, and
the SIR configuration; baselines swap the variational stage for slice
sampling over the same potential.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import ndiff as nd
from .calibration import CalibNet, CalibrationKernel, train_calib
from .density_models import (
    LikelihoodModel,
    RatioModel,
    TrainConfig,
    log_potential_likelihood,
    log_potential_ratio,
    train_likelihood,
    train_ratio,
)
from .flows import FlowModel, TransformSpec, default_likelihood_spec, default_posterior_spec
from .objectives import FitSchedule, VariationalObjective, fit_posterior
from .priors import support_map_for
from .rng import substream
from .samplers import SliceConfig, slice_sample
from .sir import SirConfig, sir_sample


class SimulationStore:
    """Append-only record set of (theta, x-or-marker, valid, round).

    Invalid rows keep a NaN placeholder in memory but are flagged; the CSV
    form writes empty cells for them, so no NaN ever reaches the file.
    """

    def __init__(self, d_theta: int, d_x: int):
        self.d_theta = d_theta
        self.d_x = d_x
        self.thetas = np.empty((0, d_theta))
        self.xs = np.empty((0, d_x))
        self.valids = np.empty(0, dtype=bool)
        self.rounds = np.empty(0, dtype=int)

    def __len__(self):
        return len(self.thetas)

    @property
    def round_count(self):
        return int(self.rounds.max()) if len(self.rounds) else 0

    def add_batch(self, thetas, xs, valids, round_idx: int):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        valids = np.asarray(valids, dtype=bool)
        xs = np.where(valids[:, None], xs, np.nan)
        self.thetas = np.concatenate([self.thetas, thetas])
        self.xs = np.concatenate([self.xs, xs])
        self.valids = np.concatenate([self.valids, valids])
        self.rounds = np.concatenate([self.rounds,
                                      np.full(len(thetas), round_idx, dtype=int)])

    def kernel_positive(self, kernel: CalibrationKernel):
        """Records with kernel weight > 0: (thetas, xs, weights, indices)."""
        w = kernel.weights(self.xs, self.valids)
        keep = w > 0
        idx = np.where(keep)[0]
        return self.thetas[keep], self.xs[keep], w[keep], idx

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"theta_{i}" for i in range(self.d_theta)]
                            + [f"x_{i}" for i in range(self.d_x)]
                            + ["valid", "round"])
            for t, x, v, r in zip(self.thetas, self.xs, self.valids, self.rounds):
                xcells = ([format(xx, ".17g") for xx in x] if v
                          else [""] * self.d_x)
                writer.writerow([format(tt, ".17g") for tt in t] + xcells
                                + [int(v), int(r)])

    @classmethod
    def from_csv(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            d_theta = sum(1 for h in header if h.startswith("theta_"))
            d_x = sum(1 for h in header if h.startswith("x_"))
            store = cls(d_theta, d_x)
            for row in reader:
                theta = [float(v) for v in row[:d_theta]]
                valid = bool(int(row[d_theta + d_x]))
                rnd = int(row[d_theta + d_x + 1])
                x = ([float(v) for v in row[d_theta:d_theta + d_x]] if valid
                     else [np.nan] * d_x)
                store.add_batch(np.array([theta]), np.array([x]),
                                np.array([valid]), rnd)
        return store


@dataclass
class SnviConfig:
    rounds: int = 10
    sims_per_round: object = 1000  # int, or a per-round list
    surrogate: str = "likelihood"  # "likelihood" | "ratio"
    objective: VariationalObjective = field(default_factory=VariationalObjective)
    sir: SirConfig | None = field(default_factory=SirConfig)
    calibration: bool = False
    proposal: str = "posterior"  # "posterior" | "prior" | "mixture"
    mixture_beta: float = 0.5
    proposal_sir: bool = False
    sampler: str = "vi"  # "vi" | "mcmc" (reference baseline)
    slice_cfg: SliceConfig = field(default_factory=SliceConfig)
    fit_schedule: FitSchedule = field(default_factory=FitSchedule)
    train: TrainConfig | None = None
    posterior_spec: TransformSpec | None = None
    likelihood_spec: TransformSpec | None = None
    # warm-started rounds only track the slowly sharpening potential; full
    # steps there overshoot onto single modes when weights degenerate
    vi_lr_decay: float = 0.5
    vi_lr_floor: float = 1e-3

    def per_round(self):
        if isinstance(self.sims_per_round, (list, tuple, np.ndarray)):
            ns = [int(n) for n in self.sims_per_round]
            if len(ns) != self.rounds:
                raise nd.ContractError(
                    f"sims_per_round list has {len(ns)} entries for "
                    f"{self.rounds} rounds")
        else:
            ns = [int(self.sims_per_round)] * self.rounds
        if self.rounds < 1 or any(n < 2 for n in ns):
            raise nd.ContractError("need rounds >= 1 and >= 2 simulations per round")
        return ns

    def validate(self):
        self.per_round()
        if self.surrogate not in ("likelihood", "ratio"):
            raise nd.ContractError(f"unknown surrogate {self.surrogate!r}")
        if self.proposal not in ("posterior", "prior", "mixture"):
            raise nd.ContractError(f"unknown proposal strategy {self.proposal!r}")
        if self.sampler not in ("vi", "mcmc"):
            raise nd.ContractError(f"unknown sampler {self.sampler!r}")
        self.objective.validate()
        if self.sir is not None:
            self.sir.validate()


class Posterior:
    """User-facing sampling bundle: variational flow + potential + SIR.

    `log_prob` is the raw flow's density only: SIR-corrected output has no
    closed form. MCMC-backed baselines sample by slice sampling the
    potential instead of using a flow.
    """

    def __init__(self, q: FlowModel | None, log_potential, sir_cfg: SirConfig | None,
                 prior=None, method: str = "vi", slice_cfg: SliceConfig | None = None):
        self.q = q
        self.log_potential = log_potential
        self.sir_cfg = sir_cfg
        self.prior = prior
        self.method = method
        self.slice_cfg = slice_cfg

    def sample(self, n: int, rng: np.random.Generator, use_sir: bool | None = None):
        if self.method == "mcmc":
            samples, _ = slice_sample(self.log_potential, self.prior,
                                      self.slice_cfg, n, rng)
            return samples
        sir_on = self.sir_cfg is not None if use_sir is None else use_sir
        if sir_on:
            cfg = self.sir_cfg or SirConfig()
            return sir_sample(self.q, self.log_potential, cfg, n, rng)
        theta, _ = self.q.sample(n, rng)
        return theta

    def log_prob(self, theta):
        if self.q is None:
            raise nd.ContractError("MCMC-backed posterior has no closed-form density")
        return self.q.log_prob(theta)


def posterior_sample(post: Posterior, n: int, rng: np.random.Generator):
    return post.sample(n, rng)


def propose(strategy: str, q, prior, n: int, rng: np.random.Generator,
            beta: float = 0.5):
    """Draw proposal parameters: from the prior, the current posterior
    flow, or a binomial beta-mixture of the two."""
    if strategy == "prior":
        return prior.sample(n, rng)
    if strategy == "posterior":
        theta, _ = q.sample(n, rng)
        return theta
    if strategy == "mixture":
        from_prior = rng.random(n) < beta
        k = int(from_prior.sum())
        out = np.empty((n, prior.d))
        if k:
            out[from_prior] = prior.sample(k, rng)
        if n - k:
            out[~from_prior], _ = q.sample(n - k, rng)
        return out
    raise nd.ContractError(f"unknown proposal strategy {strategy!r}")


@dataclass
class RoundArtifacts:
    round_idx: int
    n_sims: int
    n_valid: int
    surrogate_report: object = None
    calib_report: object = None
    fit_report: object = None
    timings: dict = field(default_factory=dict)


@dataclass
class RunArtifacts:
    store: SimulationStore = None
    rounds: list = field(default_factory=list)
    calib_thetas: np.ndarray = None
    calib_weights: np.ndarray = None
    surrogate: object = None
    calib_net: object = None


def _build_surrogate(task, cfg, seed):
    train = cfg.train or TrainConfig()
    if cfg.surrogate == "likelihood":
        spec = cfg.likelihood_spec or default_likelihood_spec()
        return LikelihoodModel(task.d_x, task.d_theta, spec=spec, train=train,
                               seed=seed)
    return RatioModel(task.d_x, task.d_theta, train=replace(train, lr=1e-3)
                      if cfg.train is None else train, seed=seed)


def make_potential(surrogate, x_o, prior, calib=None):
    """Closure over the unnormalized log posterior; accepts arrays or
    graph nodes."""
    if isinstance(surrogate, LikelihoodModel):
        return lambda theta: log_potential_likelihood(surrogate, x_o, theta,
                                                      prior, calib)
    return lambda theta: log_potential_ratio(surrogate, x_o, theta, prior, calib)


def run_snvi(task, cfg: SnviConfig, seed: int, out_dir: str | None = None):
    """Run the full sequential loop; returns (Posterior, RunArtifacts)."""
    cfg.validate()
    per_round = cfg.per_round()
    prior = task.prior

    store = SimulationStore(task.d_theta, task.d_x)
    kernel = CalibrationKernel("binary-validity")
    surrogate = _build_surrogate(task, cfg, seed)
    calib_net = CalibNet(task.d_theta, seed=seed) if cfg.calibration else None
    calib_thetas = np.empty((0, task.d_theta))
    calib_weights = np.empty(0)

    post_spec = cfg.posterior_spec or default_posterior_spec(
        task.d_theta, family=task.posterior_family)
    q = FlowModel(post_spec, task.d_theta, support=support_map_for(prior),
                  seed=seed, name="posterior")

    artifacts = RunArtifacts(store=store, surrogate=surrogate, calib_net=calib_net)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _write_run_config(out_dir, task, cfg, seed)

    mcmc_proposal_cache = None
    potential = None

    for r in range(1, cfg.rounds + 1):
        art = RoundArtifacts(round_idx=r, n_sims=per_round[r - 1], n_valid=0)
        t_round = time.perf_counter()

        # -- propose & simulate
        t0 = time.perf_counter()
        n_r = per_round[r - 1]
        rng_prop = substream(seed, "propose", r)
        if r == 1:
            theta = propose("prior", q, prior, n_r, rng_prop)
        elif cfg.sampler == "mcmc":
            theta = mcmc_proposal_cache[:n_r]
        elif cfg.proposal_sir and cfg.sir is not None:
            theta = sir_sample(q, potential, cfg.sir, n_r, rng_prop)
        else:
            theta = propose(cfg.proposal, q, prior, n_r, rng_prop,
                            beta=cfg.mixture_beta)

        rng_sim = substream(seed, "simulate", r)
        try:
            x, valid = task.simulate(theta, rng_sim)
        except Exception:
            x = np.full((n_r, task.d_x), np.nan)
            valid = np.zeros(n_r, dtype=bool)
        with np.errstate(invalid="ignore"):
            valid = np.asarray(valid, dtype=bool) & np.all(np.isfinite(x), axis=1)
        store.add_batch(theta, x, valid, r)
        art.n_valid = int(valid.sum())
        art.timings["simulate"] = time.perf_counter() - t0

        w = kernel.weights(store.xs[-n_r:], valid)
        calib_thetas = np.concatenate([calib_thetas, np.atleast_2d(theta)])
        calib_weights = np.concatenate([calib_weights, w])

        if r == 1 and art.n_valid == 0 and not cfg.calibration:
            raise nd.ContractError(
                "every first-round simulation was invalid and calibration is "
                "disabled; enable calibration to correct for invalid data")

        # -- retrain surrogate (warm start, all accumulated rounds)
        t0 = time.perf_counter()
        if cfg.surrogate == "likelihood":
            art.surrogate_report = train_likelihood(surrogate, store, kernel,
                                                    seed=seed)
        else:
            art.surrogate_report = train_ratio(surrogate, store, kernel, seed=seed)
        art.timings["train"] = time.perf_counter() - t0

        # -- retrain calibration net on ALL pairs, invalid included
        t0 = time.perf_counter()
        if calib_net is not None:
            art.calib_report = train_calib(calib_net, calib_thetas, calib_weights,
                                           seed=seed)
        art.timings["calibrate"] = time.perf_counter() - t0

        potential = make_potential(surrogate, task.x_o, prior,
                                   calib_net if cfg.calibration else None)

        # -- refit the posterior
        t0 = time.perf_counter()
        if cfg.sampler == "vi":
            lr_r = max(cfg.objective.lr * cfg.vi_lr_decay ** (r - 1),
                       cfg.vi_lr_floor)
            art.fit_report = fit_posterior(q, potential,
                                           replace(cfg.objective, lr=lr_r),
                                           cfg.fit_schedule,
                                           seed=substream(seed, "vi-round", r)
                                           .integers(2**31))
        else:
            if r < cfg.rounds:
                n_next = per_round[r]
                mcmc_proposal_cache, _ = slice_sample(
                    potential, prior, cfg.slice_cfg, n_next,
                    substream(seed, "mcmc-proposal", r))
        art.timings["fit"] = time.perf_counter() - t0
        art.timings["total"] = time.perf_counter() - t_round
        artifacts.rounds.append(art)

        if out_dir:
            _write_round(out_dir, r, q, surrogate, calib_net, art, cfg)

    artifacts.calib_thetas = calib_thetas
    artifacts.calib_weights = calib_weights

    if cfg.sampler == "vi":
        posterior = Posterior(q, potential, cfg.sir, prior=prior, method="vi")
    else:
        posterior = Posterior(None, potential, None, prior=prior, method="mcmc",
                              slice_cfg=cfg.slice_cfg)
    if out_dir:
        store.to_csv(os.path.join(out_dir, "store.csv"))
        _write_metrics(out_dir, artifacts)
        with open(os.path.join(out_dir, "observation.csv"), "w", newline="",
                  encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x_{i}" for i in range(task.d_x)])
            writer.writerow([format(v, ".17g") for v in np.atleast_1d(task.x_o)])
        if cfg.calibration:
            from .calibration import save_pairs_csv

            save_pairs_csv(os.path.join(out_dir, "calibration.csv"),
                           calib_thetas, calib_weights)
    return posterior, artifacts


def _jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {k: _jsonable(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    return obj


def _write_run_config(out_dir, task, cfg, seed):
    """Driver-level resolved configuration; the CLI's richer config.json
    takes precedence when it already exists."""
    path = os.path.join(out_dir, "config.json")
    if os.path.exists(path):
        return
    payload = {"task": task.name, "seed": int(seed), "config": _jsonable(cfg)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def _write_round(out_dir, r, q, surrogate, calib_net, art, cfg):
    rd = os.path.join(out_dir, f"round_{r}")
    os.makedirs(rd, exist_ok=True)
    q.save(os.path.join(rd, "posterior"))
    if isinstance(surrogate, LikelihoodModel):
        surrogate.flow.save(os.path.join(rd, "likelihood"))
    else:
        surrogate.store.save(os.path.join(rd, "ratio.params"))
    if calib_net is not None:
        calib_net.store.save(os.path.join(rd, "calibration.params"))
    reports = {
        "surrogate": art.surrogate_report.to_json() if art.surrogate_report else None,
        "calibration": art.calib_report.to_json() if art.calib_report else None,
        "fit": art.fit_report.to_json() if art.fit_report else None,
        "timings": art.timings,
        "n_valid": art.n_valid,
    }
    with open(os.path.join(rd, "reports.json"), "w", encoding="utf-8") as fh:
        json.dump(reports, fh, indent=1)


METRICS_HEADER = ["round", "n_sims", "n_valid", "surrogate_val_loss",
                  "vi_loss", "vi_ess", "t_simulate", "t_train",
                  "t_calibrate", "t_fit", "t_total", "metric", "value"]


def _write_metrics(out_dir, artifacts):
    path = os.path.join(out_dir, "metrics.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for art in artifacts.rounds:
            sur = art.surrogate_report
            fit = art.fit_report
            writer.writerow([
                art.round_idx, art.n_sims, art.n_valid,
                format(sur.best_val_loss, ".17g") if sur else "",
                format(fit.losses[-1], ".17g") if fit and fit.losses else "",
                format(fit.ess[-1], ".17g") if fit and fit.ess else "",
                *(format(art.timings.get(k, float("nan")), ".17g")
                  for k in ("simulate", "train", "calibrate", "fit", "total")),
                "", "",
            ])
