"""Shared test helpers."""

import numpy as np

from snvi.flows import TransformSpec, make_flow, scale_to_raw


def fixed_gaussian_flow(mu, sigma, seed=0):
    """A 1-layer affine flow pinned to an exact diagonal Gaussian."""
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), mu.shape)
    d = mu.shape[0]
    flow = make_flow(TransformSpec(family="affine", layers=1, hidden=(8,)), d,
                     seed=seed)
    bout = flow.store.params["layer0.bout"]
    raw = bout.value.reshape(d, 2).copy()
    raw[:, 0] = mu
    raw[:, 1] = scale_to_raw(sigma)
    bout.value = raw.reshape(-1)
    return flow


def gaussian_logpdf(x, mu, sigma):
    x = np.atleast_2d(x)
    mu = np.atleast_1d(mu)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), mu.shape)
    return (-0.5 * np.sum(((x - mu) / sigma) ** 2, axis=1)
            - np.sum(np.log(sigma)) - 0.5 * len(mu) * np.log(2 * np.pi))
