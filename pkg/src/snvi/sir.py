"""Sampling importance resampling over a variational proposal.

Each output draws K proposals from q, weights them by
exp(log_potential - log q) normalized within its own K-batch, and keeps
one index drawn categorically. No weight sharing across outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ndiff import ContractError


@dataclass
class SirConfig:
    k: int = 32
    max_retries: int = 10

    def validate(self):
        if self.k < 1:
            raise ContractError(f"SIR needs k >= 1, got {self.k}")


class ProposalDisjointError(ContractError):
    """All K weights were zero for some output even after retries."""


def _log_weights(q, log_potential, n, k, rng):
    theta, logq = q.sample(n * k, rng)
    lpot = np.asarray(log_potential(theta), dtype=np.float64)
    lw = (lpot - logq).reshape(n, k)
    return theta.reshape(n, k, -1), lw


def sir_sample(q, log_potential, cfg: SirConfig, n: int,
               rng: np.random.Generator) -> np.ndarray:
    """Draw n SIR-corrected samples; all n*k proposals are vectorized.

    Outputs whose K-batch is entirely -inf are redrawn up to
    cfg.max_retries times before raising."""
    cfg.validate()
    theta, lw = _log_weights(q, log_potential, n, cfg.k, rng)
    dead = ~np.any(np.isfinite(lw), axis=1)
    for _ in range(cfg.max_retries):
        if not np.any(dead):
            break
        redraw_theta, redraw_lw = _log_weights(q, log_potential, int(dead.sum()),
                                               cfg.k, rng)
        theta[dead] = redraw_theta
        lw[dead] = redraw_lw
        dead = ~np.any(np.isfinite(lw), axis=1)
    if np.any(dead):
        raise ProposalDisjointError(
            "proposal disjoint from potential: some outputs kept all-zero "
            f"weights after {cfg.max_retries} retries")

    m = np.max(lw, axis=1, keepdims=True)
    w = np.exp(lw - m)
    wt = w / w.sum(axis=1, keepdims=True)
    u = rng.random((n, 1))
    idx = np.sum(np.cumsum(wt, axis=1) < u, axis=1)
    idx = np.minimum(idx, cfg.k - 1)
    return theta[np.arange(n), idx]


def sir_diagnostics(q, log_potential, cfg: SirConfig, probes: int,
                    rng: np.random.Generator) -> dict:
    """Effective sample size (sum w)^2 / sum w^2 per K-batch plus the mean
    max normalized weight over probe batches."""
    cfg.validate()
    if probes < 1:
        raise ContractError("need at least one probe batch")
    _, lw = _log_weights(q, log_potential, probes, cfg.k, rng)
    m = np.max(lw, axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    w = np.exp(lw - m)
    sums = w.sum(axis=1)
    sq = (w**2).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        ess = np.where(sq > 0, sums**2 / sq, 0.0)
        max_wt = np.where(sums > 0, w.max(axis=1) / sums, np.nan)
    return {"ess": ess.tolist(), "mean_ess": float(np.mean(ess)),
            "mean_max_weight": float(np.mean(max_wt)), "k": cfg.k,
            "probes": probes}
