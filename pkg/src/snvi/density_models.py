"""Surrogate models trained from simulation records.

`LikelihoodModel` learns a conditional-flow density over x given theta.
`RatioModel` learns the joint-vs-marginal classifier whose logit estimates
the likelihood-to-(proposal-)evidence ratio. Both train with calibration-
kernel weights, warm-start across rounds, hold out a validation split for
early stopping, and keep a frozen input standardization fitted on the
first round's data.

Passing a graph node as theta to `log_prob`/`logit` builds the gradient
path with respect to theta while holding the learned weights constant,
which is exactly what the variational objectives need from a potential.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import ndiff as nd
from .flows import FlowModel, TransformSpec, default_likelihood_spec
from .nets import ResidualMLP, Standardizer
from .rng import substream


class NoTrainableRecordsError(nd.ContractError):
    """Every record in the store has zero kernel weight."""


@dataclass
class TrainConfig:
    batch_size: int = 50
    max_epochs: int = 500
    patience: int = 20
    val_fraction: float = 0.1
    lr: float = 5e-4


@dataclass
class TrainReport:
    train_losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    epochs: int = 0
    best_epoch: int = -1
    best_val_loss: float = float("inf")
    initial_val_loss: float = float("nan")
    wall_time: float = 0.0
    n_train: int = 0
    n_val: int = 0
    warnings: list = field(default_factory=list)

    def to_json(self):
        return {
            "train_losses": self.train_losses,
            "val_losses": self.val_losses,
            "epochs": self.epochs,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "initial_val_loss": self.initial_val_loss,
            "wall_time": self.wall_time,
            "n_train": self.n_train,
            "n_val": self.n_val,
            "warnings": self.warnings,
        }


def _val_mask(indices: np.ndarray, val_fraction: float) -> np.ndarray:
    """Stable pseudo-random membership by absolute record index, so the
    split never reshuffles as the store grows across rounds."""
    h = (indices.astype(np.uint64) * np.uint64(2654435761)) % np.uint64(2**32)
    return (h.astype(np.float64) / 2**32) < val_fraction


def _split(indices, cfg):
    val = _val_mask(indices, cfg.val_fraction)
    if val.all() or (~val).all():  # tiny stores: force at least one of each
        val = np.zeros(len(indices), dtype=bool)
        val[-max(1, len(indices) // 10):] = True
    return ~val, val


class LikelihoodModel:
    """Conditional flow over x given theta (the learned likelihood)."""

    def __init__(self, d_x: int, d_theta: int, spec: TransformSpec | None = None,
                 train: TrainConfig | None = None, seed: int = 0):
        self.d_x = d_x
        self.d_theta = d_theta
        self.train_cfg = train or TrainConfig()
        self.flow = FlowModel(spec or default_likelihood_spec(), d_x,
                              context_dim=d_theta, seed=seed, name="likelihood")
        self.x_std = Standardizer()
        self.theta_std = Standardizer()
        self.trained = False

    def _prepare(self, x, theta):
        if not self.x_std.fitted:
            raise nd.ContractError("likelihood model is untrained")
        xs = self.x_std.transform(x)
        ts = self.theta_std.transform(theta)
        return xs, ts

    def log_prob(self, x, theta):
        """log ell(x | theta). theta may be a graph node; the flow weights
        stay frozen on that path."""
        graph = nd.is_node(theta) or nd.is_node(x)
        xs, ts = self._prepare(x, theta)
        n_x = nd.value_of(xs).shape[0]
        n_t = nd.value_of(ts).shape[0]
        if n_x == 1 and n_t > 1:
            xs = nd.value_of(xs)
            xs = np.broadcast_to(xs, (n_t, xs.shape[1]))
        lp = self.flow.log_prob(xs, context=ts, graph=graph, frozen=True)
        return nd.add(lp, self.x_std.log_det())

    def loss_value(self, xs, thetas, weights) -> float:
        """Current weighted negative log likelihood, no graph."""
        lp = self.log_prob(xs, thetas)
        return float(-np.mean(np.asarray(weights) * lp))


def train_likelihood(model: LikelihoodModel, store, kernel, seed: int = 0) -> TrainReport:
    """Minimize the kernel-weighted negative log likelihood over every
    accumulated round. Zero-weight records never enter a batch (their loss
    term is identically zero). Warm-starts from the current weights."""
    thetas, xs, weights, indices = store.kernel_positive(kernel)
    if len(thetas) < 2:
        raise NoTrainableRecordsError(
            "no trainable records: every stored simulation has zero kernel weight")
    if not model.x_std.fitted:
        model.x_std.fit(xs)
        model.theta_std.fit(thetas)

    cfg = model.train_cfg
    report = _train_density(
        store_params=model.flow.store,
        loss_graph=lambda bi: _likelihood_loss_node(model, xs[bi], thetas[bi], weights[bi]),
        loss_value=lambda idx: model.loss_value(xs[idx], thetas[idx], weights[idx]),
        n_records=len(thetas), indices=indices, cfg=cfg,
        rng=substream(seed, "train-likelihood", store.round_count),
    )
    model.trained = True
    return report


def _likelihood_loss_node(model, x_b, t_b, w_b):
    xs = model.x_std.transform(x_b)
    ts = model.theta_std.transform(t_b)
    lp = model.flow.log_prob(xs, context=ts, graph=True)
    return nd.neg(nd.mean(nd.mul(w_b, nd.add(lp, model.x_std.log_det()))))


class RatioModel:
    """Residual-MLP classifier over (x, theta): the logit estimates the
    log likelihood-ratio up to a proposal-dependent constant."""

    def __init__(self, d_x: int, d_theta: int, width: int = 50, blocks: int = 2,
                 train: TrainConfig | None = None, seed: int = 0):
        self.d_x = d_x
        self.d_theta = d_theta
        self.train_cfg = train or TrainConfig(lr=1e-3)
        self.store = nd.ParamStore()
        self.net = ResidualMLP(self.store, "ratio", d_x + d_theta, width, blocks, 1,
                               substream(seed, "ratio-init"))
        self.x_std = Standardizer()
        self.theta_std = Standardizer()
        self.trained = False
        self._val_perm = None

    def logit(self, x, theta):
        if not self.x_std.fitted:
            raise nd.ContractError("ratio model is untrained")
        xs = self.x_std.transform(x)
        ts = self.theta_std.transform(theta)
        n_x = nd.value_of(xs).shape[0]
        n_t = nd.value_of(ts).shape[0]
        if n_x == 1 and n_t > 1:
            xs = np.broadcast_to(nd.value_of(xs), (n_t, self.d_x))
        pair = nd.concat([xs, ts], axis=1)
        # weights stay frozen either way; a node input builds the theta path
        out = self.net.forward(pair, graph=False)
        return nd.take(out, (slice(None), 0))

    def loss_value(self, xs, thetas, weights, perm) -> float:
        lj = nd.value_of(self.logit(xs, thetas))
        lm = nd.value_of(self.logit(xs[perm], thetas))
        wm = weights[perm]
        terms = np.concatenate([weights * np.logaddexp(0.0, -lj),
                                wm * np.logaddexp(0.0, lm)])
        return float(np.mean(terms))


def train_ratio(model: RatioModel, store, kernel, seed: int = 0) -> TrainReport:
    """Contrastive training: joint pairs (theta_i, x_i) against shuffled
    pairs (theta_i, x_sigma(i)), both classes weighted by the calibration
    kernel of their x."""
    thetas, xs, weights, indices = store.kernel_positive(kernel)
    if len(thetas) < 2:
        raise NoTrainableRecordsError(
            "no trainable records: every stored simulation has zero kernel weight")
    if not model.x_std.fitted:
        model.x_std.fit(xs)
        model.theta_std.fit(thetas)

    rng = substream(seed, "train-ratio", store.round_count)
    val_rng = substream(seed, "ratio-val-perm")

    def loss_graph(bi):
        perm = rng.permutation(len(bi))
        xs_b = xs[bi]
        t_b = thetas[bi]
        w_b = weights[bi]
        xsn = model.x_std.transform(xs_b)
        tsn = model.theta_std.transform(t_b)
        lj = nd.take(model.net.forward(nd.concat([xsn, tsn], axis=1), graph=True),
                     (slice(None), 0))
        lm = nd.take(model.net.forward(
            nd.concat([nd.value_of(xsn)[perm], tsn], axis=1), graph=True),
            (slice(None), 0))
        joint = nd.mul(w_b, nd.softplus(nd.neg(lj)))
        marg = nd.mul(w_b[perm], nd.softplus(lm))
        return nd.mean(nd.concat([joint, marg], axis=0))

    n = len(thetas)
    val_perm_full = val_rng.permutation(n)

    def loss_value(idx):
        sub_perm = np.argsort(np.argsort(val_perm_full[idx]))
        return model.loss_value(xs[idx], thetas[idx], weights[idx], sub_perm)

    report = _train_density(store_params=model.store, loss_graph=loss_graph,
                            loss_value=loss_value, n_records=n, indices=indices,
                            cfg=model.train_cfg, rng=rng)
    model.trained = True
    return report


def _train_density(store_params, loss_graph, loss_value, n_records, indices,
                   cfg: TrainConfig, rng) -> TrainReport:
    train_idx, val_idx = _split(indices, cfg)
    train_rows = np.where(train_idx)[0]
    val_rows = np.where(val_idx)[0]
    report = TrainReport(n_train=len(train_rows), n_val=len(val_rows))
    t0 = time.perf_counter()

    best = store_params.values()
    report.initial_val_loss = loss_value(val_rows)
    report.best_val_loss = report.initial_val_loss
    report.best_epoch = 0
    since_best = 0
    lr = cfg.lr
    plateau = max(cfg.patience // 4, 1)

    for epoch in range(cfg.max_epochs):
        # reduce-on-plateau inside the patience window: when validation
        # stalls, rewind to the best weights and continue with finer steps
        if since_best and since_best % plateau == 0 and lr > cfg.lr / 16:
            lr = max(lr * 0.5, cfg.lr / 16)
            store_params.load_values(best)
        order = rng.permutation(train_rows)
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            if len(batch) < 2:
                continue
            loss = loss_graph(batch)
            grads, _ = nd.backward(loss)
            nd.adam_step(store_params, nd.grad_map(grads, store_params), lr)
            epoch_losses.append(float(nd.value_of(loss)))
        val_loss = loss_value(val_rows)
        report.train_losses.append(float(np.mean(epoch_losses)))
        report.val_losses.append(val_loss)
        report.epochs = epoch + 1
        if val_loss < report.best_val_loss:
            report.best_val_loss = val_loss
            report.best_epoch = epoch + 1
            best = store_params.values()
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    store_params.load_values(best)
    report.wall_time = time.perf_counter() - t0
    return report


# --- potentials ---------------------------------------------------------------


def log_potential_likelihood(model: LikelihoodModel, x_o, theta, prior, calib=None):
    """log ell(x_o | theta) + log p(theta) [+ log c(theta)].

    Numpy path returns -inf outside the prior support; the graph path
    assumes in-support thetas (guaranteed by the flow's SupportMap)."""
    x_o = np.atleast_2d(np.asarray(x_o, dtype=np.float64))
    lp_prior = prior.log_prob(theta)
    if nd.is_node(theta):
        out = nd.add(model.log_prob(x_o, theta), lp_prior)
        if calib is not None:
            out = nd.add(out, calib.log_value(theta))
        return out
    lp_prior = np.asarray(lp_prior)
    out = np.full(len(nd.value_of(theta)), -np.inf)
    ok = np.isfinite(lp_prior)
    if np.any(ok):
        inside = nd.value_of(theta)[ok]
        val = nd.value_of(model.log_prob(x_o, inside)) + lp_prior[ok]
        if calib is not None:
            val = val + nd.value_of(calib.log_value(inside))
        out[ok] = val
    return out


def log_potential_ratio(model: RatioModel, x_o, theta, prior, calib=None):
    """Classifier-logit analogue of the likelihood potential."""
    x_o = np.atleast_2d(np.asarray(x_o, dtype=np.float64))
    lp_prior = prior.log_prob(theta)
    if nd.is_node(theta):
        out = nd.add(model.logit(x_o, theta), lp_prior)
        if calib is not None:
            out = nd.add(out, calib.log_value(theta))
        return out
    lp_prior = np.asarray(lp_prior)
    out = np.full(len(nd.value_of(theta)), -np.inf)
    ok = np.isfinite(lp_prior)
    if np.any(ok):
        inside = nd.value_of(theta)[ok]
        val = nd.value_of(model.logit(x_o, inside)) + lp_prior[ok]
        if calib is not None:
            val = val + nd.value_of(calib.log_value(inside))
        out[ok] = val
    return out
