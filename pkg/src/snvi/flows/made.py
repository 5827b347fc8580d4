"""Masked autoregressive conditioner (MADE-style).

Produces P transform parameters per dimension such that the parameters
for dimension i depend only on input dimensions < i (and on the context,
which is wired in with degree 0 so it reaches every output, including
the first dimension).
"""

from __future__ import annotations

import numpy as np

from .. import ndiff as nd


def _hidden_degrees(n_units: int, d: int, has_context: bool) -> np.ndarray:
    lo = 0 if has_context else 1
    hi = max(d - 1, lo)
    span = hi - lo + 1
    return lo + (np.arange(n_units) % span)


class MaskedConditioner:
    """Feedforward ReLU net with autoregressive connectivity masks."""

    def __init__(self, store: nd.ParamStore, prefix: str, d: int, n_params: int,
                 hidden, context_dim: int, rng: np.random.Generator):
        self.d = d
        self.n_params = n_params
        self.context_dim = context_dim
        self.prefix = prefix
        self.store = store

        in_degrees = np.concatenate([np.arange(1, d + 1), np.zeros(context_dim)])
        degrees = [in_degrees]
        sizes = [d + context_dim] + list(hidden)
        for h in hidden:
            degrees.append(_hidden_degrees(h, d, context_dim > 0))

        self.masks = []
        self._names = []
        for k in range(len(hidden)):
            mask = (degrees[k + 1][None, :] >= degrees[k][:, None]).astype(np.float64)
            self.masks.append(mask)
            w = rng.normal(0.0, np.sqrt(2.0 / sizes[k]), size=(sizes[k], sizes[k + 1]))
            store.register(f"{prefix}.w{k}", w * mask)
            store.register(f"{prefix}.b{k}", np.zeros(sizes[k + 1]))
            self._names.append((f"{prefix}.w{k}", f"{prefix}.b{k}"))

        out_degrees = np.repeat(np.arange(1, d + 1), n_params)
        out_mask = (out_degrees[None, :] > degrees[-1][:, None]).astype(np.float64)
        self.masks.append(out_mask)
        store.register(f"{prefix}.wout", np.zeros((sizes[-1], d * n_params)))
        store.register(f"{prefix}.bout", np.zeros(d * n_params))

    def _param(self, name, graph):
        return self.store.node(name) if graph else self.store.params[name].value

    def perturb(self, rng: np.random.Generator, scale: float):
        """Add mask-respecting, fan-in-scaled noise to all weights: random
        non-identity flows with trained-network-like output magnitudes."""
        for k, (wn, bn) in enumerate(self._names):
            p = self.store.params[wn]
            std = scale / np.sqrt(p.value.shape[0])
            p.value = p.value + std * rng.normal(size=p.value.shape) * self.masks[k]
            b = self.store.params[bn]
            b.value = b.value + 0.1 * scale * rng.normal(size=b.value.shape)
        wout = self.store.params[f"{self.prefix}.wout"]
        std = scale / np.sqrt(wout.value.shape[0])
        wout.value = wout.value + std * rng.normal(size=wout.value.shape) * self.masks[-1]
        bout = self.store.params[f"{self.prefix}.bout"]
        bout.value = bout.value + 0.1 * scale * rng.normal(size=bout.value.shape)

    def forward(self, u, context=None, graph: bool = False, dims=None):
        """Return transform parameters with shape (n, n_dims, P).

        ``dims=(lo, hi)`` restricts the output head to that dimension
        block; the sequential inverse uses it to skip the 1-dims/d of the
        head it would otherwise recompute and discard at every step.
        """
        if self.context_dim:
            if context is None:
                raise nd.DimensionError("conditioner is conditional but no context given")
            if nd.value_of(context).shape[-1] != self.context_dim:
                raise nd.DimensionError(
                    f"context has {nd.value_of(context).shape[-1]} features, "
                    f"expected {self.context_dim}"
                )
            h = nd.concat([u, context], axis=1)
        else:
            h = u
        for k, (wn, bn) in enumerate(self._names):
            w = nd.mul(self._param(wn, graph), self.masks[k])
            h = nd.relu(nd.add(nd.matmul(h, w), self._param(bn, graph)))
        lo, hi = (0, self.d) if dims is None else dims
        cols = slice(lo * self.n_params, hi * self.n_params)
        wout = nd.mul(nd.take(self._param(f"{self.prefix}.wout", graph),
                              (slice(None), cols)),
                      self.masks[-1][:, cols])
        out = nd.add(nd.matmul(h, wout),
                     nd.take(self._param(f"{self.prefix}.bout", graph), cols))
        n = nd.value_of(out).shape[0]
        return nd.reshape(out, (n, hi - lo, self.n_params))
