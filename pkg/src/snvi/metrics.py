"""Posterior-quality metrics: classifier two-sample test, moment errors,
mode-mass accounting."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from sklearn.model_selection import KFold
from sklearn.neural_network import MLPClassifier

from .ndiff import ContractError, DimensionError


@dataclass
class C2stResult:
    accuracy: float
    fold_accuracies: list
    n_per_set: int
    classifier: str = "mlp"
    folds: int = 5


def c2st(samples_a, samples_b, seed: int = 0, folds: int = 5,
         max_iter: int = 300) -> C2stResult:
    """Cross-validated held-out accuracy of an MLP telling the two sample
    sets apart: 0.5 means indistinguishable, 1.0 fully separable.

    Inputs are truncated to equal size, jointly z-scored, and classified
    by a 2-hidden-layer MLP with 10*d units per layer.
    """
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"sample sets must share dimension, got {a.shape} vs {b.shape}")
    n = min(len(a), len(b))
    if n < 500:
        raise ContractError(f"need at least 500 samples per set, got {n}")
    a, b = a[:n], b[:n]
    x = np.concatenate([a, b], axis=0)
    y = np.concatenate([np.zeros(n), np.ones(n)])
    mu, sd = x.mean(axis=0), np.maximum(x.std(axis=0), 1e-12)
    x = (x - mu) / sd

    d = x.shape[1]
    accs = []
    kf = KFold(n_splits=folds, shuffle=True, random_state=seed)
    for k, (tr, te) in enumerate(kf.split(x)):
        clf = MLPClassifier(hidden_layer_sizes=(10 * d, 10 * d),
                            max_iter=max_iter, random_state=seed + k,
                            early_stopping=True, n_iter_no_change=20)
        clf.fit(x[tr], y[tr])
        accs.append(float(clf.score(x[te], y[te])))
    return C2stResult(accuracy=float(np.mean(accs)), fold_accuracies=accs,
                      n_per_set=n, folds=folds)


def mode_mass(samples, regions) -> dict:
    """Fraction of samples falling in each (disjoint) region.

    Regions are callables mapping (n, d) samples to boolean membership.
    Returns per-region fractions plus the leftover mass.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) == 0:
        raise ContractError("mode_mass requires a non-empty sample set")
    members = np.stack([np.asarray(r(samples), dtype=bool) for r in regions])
    if np.any(members.sum(axis=0) > 1):
        raise ContractError("mode regions overlap on the given samples")
    fracs = members.mean(axis=1)
    return {"masses": fracs.tolist(), "remainder": float(1.0 - fracs.sum())}


def moment_error(samples, oracle_mean, oracle_cov) -> dict:
    """Mean-absolute error of the mean and Frobenius error of the covariance
    against oracle moments."""
    samples = np.asarray(samples, dtype=np.float64)
    oracle_mean = np.atleast_1d(np.asarray(oracle_mean, dtype=np.float64))
    oracle_cov = np.atleast_2d(np.asarray(oracle_cov, dtype=np.float64))
    mean_err = float(np.mean(np.abs(samples.mean(axis=0) - oracle_mean)))
    cov = np.cov(samples.T).reshape(oracle_cov.shape)
    cov_err = float(np.linalg.norm(cov - oracle_cov))
    return {"mean_abs_error": mean_err, "cov_frobenius_error": cov_err}


METRIC_FIELDS = ["run_id", "task", "method", "budget", "metric", "value", "wall_time"]


def append_metric_row(path, run_id, task, method, budget, metric, value,
                      wall_time=float("nan")):
    new = not os.path.exists(path)
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(METRIC_FIELDS)
        writer.writerow([run_id, task, method, budget, metric,
                         format(float(value), ".17g"), format(float(wall_time), ".17g")])
