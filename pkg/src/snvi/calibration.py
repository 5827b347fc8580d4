"""Calibration kernels and the validity-correction network.

Likelihood(-ratio) surrogates trained only on valid simulations converge
to a density divided by the per-theta validity probability; the
correction network learns that probability from (theta, kernel weight)
pairs so the potential can multiply it back in.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import ndiff as nd
from .nets import MLP, Standardizer
from .rng import substream

LOG_CLIP = -30.0  # keeps the potential finite where the net predicts ~0


@dataclass
class CalibrationKernel:
    """Per-simulation loss weight K(x, x_o) >= 0.

    kinds: "constant-one" (no reweighting), "binary-validity" (0 for
    invalid records, 1 otherwise), "custom" (arbitrary non-negative
    function of (x, x_o); invalid records get weight 0 since their x is
    unusable). Custom kernels carry their observation in `x_o`.
    """

    kind: str = "binary-validity"
    fn: object = None
    x_o: object = None

    def weights(self, xs, valids):
        valids = np.asarray(valids, dtype=bool)
        if self.kind == "constant-one":
            return np.ones(len(valids))
        if self.kind == "binary-validity":
            return valids.astype(np.float64)
        if self.kind == "custom":
            out = np.zeros(len(valids))
            if np.any(valids):
                w = np.asarray(self.fn(np.asarray(xs)[valids], self.x_o),
                               dtype=np.float64)
                if np.any(w < 0):
                    raise nd.ContractError("calibration kernel weights must be >= 0")
                out[valids] = w
            return out
        raise nd.ContractError(f"unknown kernel kind {self.kind!r}")


@dataclass
class CalibTrainReport:
    losses: list = field(default_factory=list)
    epochs: int = 0
    wall_time: float = 0.0
    degenerate_class: bool = False

    def to_json(self):
        return {"losses": self.losses, "epochs": self.epochs,
                "wall_time": self.wall_time,
                "degenerate_class": self.degenerate_class}


class CalibNet:
    """Feedforward estimate of E[K(x, x_o) | theta].

    Sigmoid head for binary kernels (outputs in [0, 1]), softplus head for
    general non-negative kernels. Trains for a fixed number of epochs per
    round and warm-starts across rounds.
    """

    def __init__(self, d_theta: int, head: str = "sigmoid", hidden=(50, 50, 50),
                 epochs: int = 200, batch_size: int = 200, lr: float = 1e-3,
                 seed: int = 0):
        if head not in ("sigmoid", "softplus"):
            raise nd.ContractError(f"unknown head {head!r}")
        self.d_theta = d_theta
        self.head = head
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.store = nd.ParamStore()
        self.net = MLP(self.store, "calib", d_theta, hidden, 1,
                       substream(seed, "calib-init"))
        # class-weighted training shifts the learned logit by exactly
        # log(w_pos / w_neg); this offset undoes it at evaluation time
        self.store.register("calib.logit_offset", np.zeros(1))
        self.theta_std = Standardizer()

    @property
    def logit_offset(self) -> float:
        return float(self.store.params["calib.logit_offset"].value[0])

    def _raw(self, theta, graph=False):
        ts = self.theta_std.transform(theta) if self.theta_std.fitted else theta
        return nd.take(self.net.forward(ts, graph=graph), (slice(None), 0))

    def _corrected(self, theta):
        return nd.sub(self._raw(theta), self.logit_offset)

    def value(self, theta):
        """c(theta) in the head's range; accepts graph nodes."""
        raw = self._corrected(theta)
        return nd.sigmoid(raw) if self.head == "sigmoid" else nd.softplus(raw)

    def log_value(self, theta):
        """log c(theta), clipped below at LOG_CLIP so in-support potentials
        never hit -inf through the correction factor."""
        raw = self._corrected(theta)
        if self.head == "sigmoid":
            return nd.maximum(nd.neg(nd.softplus(nd.neg(raw))), LOG_CLIP)
        return nd.maximum(nd.log(nd.softplus(raw)), LOG_CLIP)


def eval_calib(net: CalibNet, theta):
    return net.value(theta)


def train_calib(net: CalibNet, thetas, weights, seed: int = 0) -> CalibTrainReport:
    """Fit on ALL accumulated (theta, weight) pairs, including invalid ones.

    Binary data trains with class-weighted cross-entropy (weights estimated
    from the class frequencies); general kernels use mean-squared error on
    the softplus head. Runs exactly `net.epochs` epochs per call.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    weights = np.asarray(weights, dtype=np.float64)
    if len(thetas) == 0:
        raise nd.ContractError("train_calib requires a non-empty pair set")
    binary = np.all((weights == 0.0) | (weights == 1.0))
    if net.head == "sigmoid" and not binary:
        raise nd.ContractError("sigmoid head requires binary kernel weights")
    if not net.theta_std.fitted:
        net.theta_std.fit(thetas)

    report = CalibTrainReport()
    t0 = time.perf_counter()
    if binary:
        pos = weights.mean()
        if pos in (0.0, 1.0):
            report.degenerate_class = True
            w_pos = w_neg = 1.0
        else:
            w_pos = 1.0 / (2.0 * pos)
            w_neg = 1.0 / (2.0 * (1.0 - pos))
        per_item = np.where(weights > 0, w_pos, w_neg)
        net.store.params["calib.logit_offset"].value = np.array(
            [np.log(w_pos / w_neg)])
    else:
        per_item = np.ones(len(weights))
        net.store.params["calib.logit_offset"].value = np.zeros(1)

    rng = substream(seed, "train-calib", len(thetas))
    for epoch in range(net.epochs):
        order = rng.permutation(len(thetas))
        losses = []
        for start in range(0, len(order), net.batch_size):
            batch = order[start:start + net.batch_size]
            raw = net._raw(thetas[batch], graph=True)
            if binary:
                y = weights[batch]
                term = nd.add(nd.mul(y, nd.softplus(nd.neg(raw))),
                              nd.mul(1.0 - y, nd.softplus(raw)))
            else:
                pred = nd.softplus(raw)
                term = nd.square(nd.sub(pred, weights[batch]))
            loss = nd.mean(nd.mul(per_item[batch], term))
            grads, _ = nd.backward(loss)
            nd.adam_step(net.store, nd.grad_map(grads, net.store), net.lr)
            losses.append(float(nd.value_of(loss)))
        report.losses.append(float(np.mean(losses)))
        report.epochs = epoch + 1
    report.wall_time = time.perf_counter() - t0
    return report


def fit_binned_calibration(values, weights, edges):
    """MSE-minimizing lookup table: per-bin empirical mean kernel weight.

    `values` is the 1-d binning coordinate (a theta projection); entries
    outside the edges fall into the end bins. Empty bins yield nan.
    """
    values = np.asarray(values, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    idx = np.clip(np.searchsorted(edges, values, side="right") - 1,
                  0, len(edges) - 2)
    table = np.full(len(edges) - 1, np.nan)
    for b in range(len(edges) - 1):
        sel = idx == b
        if np.any(sel):
            table[b] = weights[sel].mean()
    return table


def save_pairs_csv(path, thetas, weights):
    thetas = np.atleast_2d(thetas)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"theta_{i}" for i in range(thetas.shape[1])] + ["kernel_weight"])
        for row, w in zip(thetas, weights):
            writer.writerow([format(v, ".17g") for v in row] + [format(w, ".17g")])


def load_pairs_csv(path):
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        d = len(header) - 1
        thetas, weights = [], []
        for row in reader:
            thetas.append([float(v) for v in row[:d]])
            weights.append(float(row[d]))
    return np.asarray(thetas), np.asarray(weights)
