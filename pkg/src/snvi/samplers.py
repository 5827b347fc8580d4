"""Axis-aligned slice sampling with vectorized parallel chains.

The reference MCMC route for surrogate potentials and for ground-truth
posteriors of tasks with tractable likelihoods. All chains advance in
lockstep; the potential is always evaluated on the full chain batch, so
one numpy call serves every chain.

Slice acceptance tests are computed as potential differences, which makes
chains invariant to any constant shift of the log potential.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ndiff import ContractError


@dataclass
class SliceConfig:
    chains: int = 100
    burn_in: int = 200
    thin: int | None = None  # default: one kept state per d sweeps
    width: np.ndarray | None = None  # initial bracket width; default prior std
    max_doublings: int = 10
    max_shrink: int = 100

    def validate(self):
        if self.chains < 1:
            raise ContractError("need at least one chain")
        if self.width is not None and np.any(np.asarray(self.width) <= 0):
            raise ContractError("bracket widths must be positive")


def _init_chains(log_potential, prior, chains, rng):
    x = prior.sample(chains, rng)
    lp = log_potential(x)
    for _ in range(100):
        bad = ~np.isfinite(lp)
        if not np.any(bad):
            break
        x[bad] = prior.sample(int(bad.sum()), rng)
        lp = log_potential(x)
    if np.any(~np.isfinite(lp)):
        raise ContractError(
            "slice sampler could not initialize: potential is -inf at all "
            "prior draws")
    return x, lp


def slice_sample(log_potential, prior, cfg: SliceConfig, n_total: int,
                 rng: np.random.Generator):
    """Draw n_total pooled samples; returns (samples [n_total, d], diagnostics).

    Per chain and per sweep, every dimension is updated once with
    step-out-by-doubling followed by shrinkage bracketing.
    """
    cfg.validate()
    d = prior.d
    thin = cfg.thin if cfg.thin is not None else d
    width = (np.asarray(cfg.width, dtype=np.float64) if cfg.width is not None
             else np.asarray(prior.std_dev(), dtype=np.float64))
    width = np.broadcast_to(width, (d,)).astype(np.float64)

    x, lp = _init_chains(log_potential, prior, cfg.chains, rng)
    n_keep = int(np.ceil(n_total / cfg.chains))
    sweeps = cfg.burn_in + n_keep * thin

    stuck = 0
    stepout_hits = 0
    kept = []

    for sweep in range(sweeps):
        for j in range(d):
            log_u = np.log(rng.random(cfg.chains))
            r = rng.random(cfg.chains)
            left = x[:, j] - width[j] * r
            right = left + width[j]

            def pot_at(col):
                z = x.copy()
                z[:, j] = col
                return log_potential(z)

            # step out by doubling the distance from the current point
            for _ in range(cfg.max_doublings):
                grow_l = (pot_at(left) - lp) > log_u
                grow_r = (pot_at(right) - lp) > log_u
                if not (np.any(grow_l) or np.any(grow_r)):
                    break
                left = np.where(grow_l, x[:, j] - 2.0 * (x[:, j] - left), left)
                right = np.where(grow_r, x[:, j] + 2.0 * (right - x[:, j]), right)
            else:
                still = np.sum(((pot_at(left) - lp) > log_u)
                               | ((pot_at(right) - lp) > log_u))
                stepout_hits += int(still)

            # shrinkage
            active = np.ones(cfg.chains, dtype=bool)
            new_col = x[:, j].copy()
            new_lp = lp.copy()
            for _ in range(cfg.max_shrink):
                if not np.any(active):
                    break
                prop = np.where(active,
                                left + rng.random(cfg.chains) * (right - left),
                                new_col)
                lp_prop = pot_at(prop)
                accept = active & ((lp_prop - lp) > log_u)
                new_col[accept] = prop[accept]
                new_lp[accept] = lp_prop[accept]
                active &= ~accept
                shrink_l = active & (prop < x[:, j])
                shrink_r = active & ~shrink_l
                left = np.where(shrink_l, prop, left)
                right = np.where(shrink_r, prop, right)
                collapsed = active & ((right - left) < 1e-12)
                if np.any(collapsed):
                    stuck += int(collapsed.sum())
                    active &= ~collapsed  # keep the current point unchanged
            else:
                stuck += int(active.sum())
            x[:, j] = new_col
            lp = new_lp

        if sweep >= cfg.burn_in and (sweep - cfg.burn_in) % thin == thin - 1:
            kept.append(x.copy())

    samples = np.concatenate(kept, axis=0)[:n_total]
    diagnostics = {
        "stepout_bound_hits": stepout_hits,
        "stuck": stuck,
        "final_log_potentials": lp.tolist(),
        "chains": cfg.chains,
        "sweeps": sweeps,
    }
    return samples, diagnostics
