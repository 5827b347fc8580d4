"""Benchmark task registry."""

from __future__ import annotations

import numpy as np

from ..ndiff import ContractError
from ..rng import substream
from .base import AnalyticGaussianOracle, McmcOracle, SamplerOracle, Task
from .benchmarks import (
    bernoulli_glm,
    glm_log_likelihood,
    glm_summary,
    lotka_volterra,
    lv_integrate,
    lv_log_likelihood,
    slcp,
    slcp_log_likelihood,
)
from .toys import (
    gaussian_toy,
    gaussian_toy_log_joint,
    invalid_gaussian,
    two_moons,
    two_moons_mode_regions,
)

REGISTRY = {
    "gaussian_toy": gaussian_toy,
    "two_moons": two_moons,
    "slcp": slcp,
    "bernoulli_glm": bernoulli_glm,
    "lotka_volterra": lotka_volterra,
    "invalid_gaussian": invalid_gaussian,
}


def get_task(name: str, obs_seed: int | None = None, **kwargs) -> Task:
    """Build a registered task; an obs_seed draws a fresh ground-truth
    parameter from the prior and simulates a new observation for it."""
    if name not in REGISTRY:
        raise ContractError(
            f"unknown task {name!r}; available: {sorted(REGISTRY)}")
    factory = REGISTRY[name]
    if name in ("slcp", "bernoulli_glm", "lotka_volterra"):
        return factory(obs_seed=obs_seed, **kwargs)
    task = factory(**kwargs)
    if obs_seed is None:
        return task
    rng = substream(obs_seed, "observation", name)
    theta_star = task.prior.sample(1, rng)
    for _ in range(100):
        x_o, valid = task.simulate(theta_star, rng)
        if valid[0]:
            break
        theta_star = task.prior.sample(1, rng)
    else:
        raise ContractError(f"could not simulate a valid observation for {name}")
    fresh = factory(x_o=x_o[0], **kwargs)
    fresh.theta_star = theta_star[0]
    return fresh


__all__ = [
    "AnalyticGaussianOracle",
    "McmcOracle",
    "REGISTRY",
    "SamplerOracle",
    "Task",
    "bernoulli_glm",
    "gaussian_toy",
    "gaussian_toy_log_joint",
    "get_task",
    "glm_log_likelihood",
    "glm_summary",
    "invalid_gaussian",
    "lotka_volterra",
    "lv_integrate",
    "lv_log_likelihood",
    "slcp",
    "slcp_log_likelihood",
    "two_moons",
    "two_moons_mode_regions",
]
