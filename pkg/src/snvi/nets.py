"""Plain feedforward building blocks shared by the classifier-based ratio
model and the calibration network."""

from __future__ import annotations

import numpy as np

from . import ndiff as nd


class MLP:
    """ReLU MLP with a zero-initialized linear head."""

    def __init__(self, store: nd.ParamStore, prefix: str, d_in: int, hidden,
                 d_out: int, rng: np.random.Generator):
        self.store = store
        self.prefix = prefix
        self._layers = []
        size = d_in
        for k, h in enumerate(hidden):
            store.register(f"{prefix}.w{k}",
                           rng.normal(0.0, np.sqrt(2.0 / size), size=(size, h)))
            store.register(f"{prefix}.b{k}", np.zeros(h))
            self._layers.append((f"{prefix}.w{k}", f"{prefix}.b{k}"))
            size = h
        store.register(f"{prefix}.wout", np.zeros((size, d_out)))
        store.register(f"{prefix}.bout", np.zeros(d_out))

    def _p(self, name, graph):
        return self.store.node(name) if graph else self.store.params[name].value

    def forward(self, x, graph: bool = False):
        h = x
        for wn, bn in self._layers:
            h = nd.relu(nd.add(nd.matmul(h, self._p(wn, graph)), self._p(bn, graph)))
        return nd.add(nd.matmul(h, self._p(f"{self.prefix}.wout", graph)),
                      self._p(f"{self.prefix}.bout", graph))


class ResidualMLP:
    """Pre-activation residual blocks of constant width, linear head."""

    def __init__(self, store: nd.ParamStore, prefix: str, d_in: int, width: int,
                 blocks: int, d_out: int, rng: np.random.Generator):
        self.store = store
        self.prefix = prefix
        self.blocks = blocks
        store.register(f"{prefix}.win",
                       rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, width)))
        store.register(f"{prefix}.bin", np.zeros(width))
        for k in range(blocks):
            std = np.sqrt(2.0 / width)
            store.register(f"{prefix}.blk{k}.w1", rng.normal(0.0, std, size=(width, width)))
            store.register(f"{prefix}.blk{k}.b1", np.zeros(width))
            store.register(f"{prefix}.blk{k}.w2", rng.normal(0.0, std, size=(width, width)))
            store.register(f"{prefix}.blk{k}.b2", np.zeros(width))
        store.register(f"{prefix}.wout", np.zeros((width, d_out)))
        store.register(f"{prefix}.bout", np.zeros(d_out))

    def _p(self, name, graph):
        return self.store.node(name) if graph else self.store.params[name].value

    def forward(self, x, graph: bool = False):
        pre = self.prefix
        h = nd.add(nd.matmul(x, self._p(f"{pre}.win", graph)), self._p(f"{pre}.bin", graph))
        for k in range(self.blocks):
            inner = nd.relu(nd.add(nd.matmul(nd.relu(h), self._p(f"{pre}.blk{k}.w1", graph)),
                                   self._p(f"{pre}.blk{k}.b1", graph)))
            inner = nd.add(nd.matmul(inner, self._p(f"{pre}.blk{k}.w2", graph)),
                           self._p(f"{pre}.blk{k}.b2", graph))
            h = nd.add(h, inner)
        return nd.add(nd.matmul(nd.relu(h), self._p(f"{pre}.wout", graph)),
                      self._p(f"{pre}.bout", graph))


class Standardizer:
    """Frozen affine whitening fit once on first-round data, so warm-started
    networks keep a stable input scale across rounds."""

    def __init__(self):
        self.mean = None
        self.std = None

    @property
    def fitted(self):
        return self.mean is not None

    def fit(self, x):
        x = np.asarray(x, dtype=np.float64)
        self.mean = x.mean(axis=0)
        self.std = np.maximum(x.std(axis=0), 1e-8)

    def transform(self, x):
        return nd.div(nd.sub(x, self.mean), self.std)

    def log_det(self):
        """log |d x_std / d x| summed over dimensions (constant)."""
        return -float(np.sum(np.log(self.std)))

    def to_config(self):
        return {"mean": None if self.mean is None else self.mean.tolist(),
                "std": None if self.std is None else self.std.tolist()}

    @classmethod
    def from_config(cls, cfg):
        out = cls()
        if cfg["mean"] is not None:
            out.mean = np.asarray(cfg["mean"], dtype=np.float64)
            out.std = np.asarray(cfg["std"], dtype=np.float64)
        return out
