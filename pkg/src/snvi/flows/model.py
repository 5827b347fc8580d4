"""Normalizing-flow density models.

A FlowModel stacks masked autoregressive layers (affine or rational-
quadratic spline) over a standard-normal base, with fixed reversing
permutations between layers and an optional SupportMap squashing onto
the prior support. The density direction (theta -> base) is a single
vectorized pass; sampling inverts the stack one dimension at a time.

Density evaluation, sampling, and reparameterized (graph) variants share
the same layer code: ops dispatch on whether inputs/parameters are graph
nodes or plain arrays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .. import ndiff as nd
from ..rng import substream
from .made import MaskedConditioner
from .support import SupportMap
from .transforms import AffineTransform, RationalQuadraticSpline

LOG_2PI = float(np.log(2.0 * np.pi))


class ConfigError(ValueError):
    """Invalid model specification."""


@dataclass
class TransformSpec:
    """Architecture of one flow: transform family and conditioner sizes."""

    family: str = "affine"  # "affine" | "rqs"
    layers: int = 5
    hidden: tuple = (50, 50)
    bins: int = 8
    tail_bound: float = 5.0

    def validate(self):
        if self.family not in ("affine", "rqs"):
            raise ConfigError(f"unknown transform family {self.family!r}")
        if self.layers < 1:
            raise ConfigError("need at least one layer")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigError(f"hidden sizes must be positive, got {self.hidden}")
        if self.family == "rqs" and self.bins < 2:
            raise ConfigError(f"spline needs at least 2 bins, got {self.bins}")

    def to_config(self):
        return {"family": self.family, "layers": self.layers,
                "hidden": list(self.hidden), "bins": self.bins,
                "tail_bound": self.tail_bound}

    @classmethod
    def from_config(cls, cfg):
        return cls(family=cfg["family"], layers=cfg["layers"],
                   hidden=tuple(cfg["hidden"]), bins=cfg["bins"],
                   tail_bound=cfg["tail_bound"])


class _Layer:
    def __init__(self, conditioner, transform, perm):
        self.cond = conditioner
        self.transform = transform
        self.perm = np.asarray(perm)
        self.inv_perm = np.argsort(self.perm)

    def fwd(self, u, context, graph):
        up = nd.take(u, (slice(None), self.perm.tolist()))
        params = self.cond.forward(up, context, graph=graph)
        v, ld = self.transform.fwd(up, params)
        return v, nd.sum(ld, axis=1)

    def inv(self, v, context, graph):
        d = self.cond.d
        n = nd.value_of(v).shape[0]
        if graph:
            up = nd.constant(np.zeros((n, d)))
            lds = []
            for i in range(d):
                p_i = self.cond.forward(up, context, graph=graph, dims=(i, i + 1))
                v_i = nd.take(v, (slice(None), slice(i, i + 1)))
                u_i, ld_i = self.transform.inv(v_i, p_i)
                lds.append(ld_i)
                parts = []
                if i > 0:
                    parts.append(nd.take(up, (slice(None), slice(0, i))))
                parts.append(u_i)
                if i + 1 < d:
                    parts.append(nd.take(up, (slice(None), slice(i + 1, d))))
                up = nd.concat(parts, axis=1)
            ld = nd.sum(nd.concat(lds, axis=1), axis=1)
        else:
            vv = nd.value_of(v)
            up = np.zeros((n, d))
            ld = np.zeros(n)
            for i in range(d):
                params = self.cond.forward(up, context, graph=False, dims=(i, i + 1))
                u_i, ld_i = self.transform.inv(vv[:, i:i + 1], params)
                up[:, i] = u_i[:, 0]
                ld += ld_i[:, 0]
        u = nd.take(up, (slice(None), self.inv_perm.tolist()))
        return u, ld


def _base_log_prob(z, d):
    return nd.sub(nd.mul(-0.5, nd.sum(nd.square(z), axis=1)), 0.5 * d * LOG_2PI)


class FlowModel:
    """Parameterized bijection stack with a standard-normal base."""

    def __init__(self, spec: TransformSpec, d: int, context_dim: int = 0,
                 support: SupportMap | None = None, seed: int = 0, name: str = "flow"):
        spec.validate()
        if d < 1:
            raise ConfigError(f"dimension must be >= 1, got {d}")
        if support is not None and support.d != d:
            raise nd.DimensionError(
                f"support map is {support.d}-dimensional, flow is {d}-dimensional")
        self.spec = spec
        self.d = d
        self.context_dim = context_dim
        self.support = support
        self.name = name
        self.store = nd.ParamStore()

        rng = substream(seed, "flow-init", name)
        self.layers = []
        for k in range(spec.layers):
            if spec.family == "affine":
                transform = AffineTransform()
            else:
                transform = RationalQuadraticSpline(bins=spec.bins,
                                                    tail_bound=spec.tail_bound)
            cond = MaskedConditioner(self.store, f"layer{k}", d, transform.n_params,
                                     spec.hidden, context_dim, rng)
            perm = np.arange(d) if k == 0 else np.arange(d)[::-1]
            self.layers.append(_Layer(cond, transform, perm))

    # -- density -------------------------------------------------------

    def _check_context(self, theta_or_n, context):
        if self.context_dim == 0:
            if context is not None:
                raise nd.DimensionError("flow is unconditional but context was given")
            return None
        if context is None:
            raise nd.DimensionError("flow is conditional: context required")
        cv = nd.value_of(context)
        if cv.ndim != 2 or cv.shape[-1] != self.context_dim:
            raise nd.DimensionError(
                f"context shape {cv.shape} incompatible with context_dim="
                f"{self.context_dim}")
        return context

    def log_prob(self, theta, context=None, graph: bool = False, frozen: bool = False):
        """Log density at theta; -inf outside the support (numpy path).

        graph=True builds the autodiff graph; frozen=True additionally
        treats the flow's own parameters as constants (the density side of
        the STL estimator), leaving only the input path differentiable.
        """
        context = self._check_context(theta, context)
        tv = nd.value_of(theta)
        if tv.ndim != 2 or tv.shape[1] != self.d:
            raise nd.DimensionError(f"theta shape {tv.shape} incompatible with d={self.d}")
        params_as_nodes = graph and not frozen
        u = theta if graph else tv
        total = None
        inside = None
        if self.support is not None:
            u, ld_s, inside = self.support.inverse(u)
            total = nd.sum(ld_s, axis=1)
        for layer in self.layers:
            u, ld = layer.fwd(u, context, graph=params_as_nodes)
            total = ld if total is None else nd.add(total, ld)
        out = nd.add(_base_log_prob(u, self.d), total)
        if not graph and inside is not None:
            out = np.where(inside, out, -np.inf)
        return out

    # -- sampling --------------------------------------------------------

    def _inverse_stack(self, z, context, graph):
        u = z
        total = None
        for layer in reversed(self.layers):
            u, ld = layer.inv(u, context, graph=graph)
            total = ld if total is None else nd.add(total, ld)
        log_q = nd.sub(_base_log_prob(z, self.d), total)
        if self.support is not None:
            theta, ld_s = self.support.forward(u)
            log_q = nd.sub(log_q, nd.sum(ld_s, axis=1))
        else:
            theta = u
        return theta, log_q

    def sample(self, n: int, rng: np.random.Generator, context=None):
        """Draw n samples; returns (theta, log_prob) as plain arrays.

        The log density comes for free from the sampling pass (base
        density minus accumulated generation log-dets), so no extra
        inverse pass is needed.
        """
        context = self._check_context(n, context)
        if context is not None and nd.value_of(context).shape[0] != n:
            raise nd.DimensionError("context batch must match sample count")
        z = rng.standard_normal((n, self.d))
        return self._inverse_stack(z, context, graph=False)

    def sample_graph(self, n: int, rng: np.random.Generator, context=None,
                     stl: bool = False):
        """Reparameterized sampling: theta is a differentiable function of
        the flow parameters. With stl=True the returned log-density treats
        the density parameters as constants (gradient flows only through
        the sample path)."""
        context = self._check_context(n, context)
        z = nd.constant(rng.standard_normal((n, self.d)))
        theta, log_q = self._inverse_stack(z, context, graph=True)
        if stl:
            log_q = self.log_prob(theta, context=context, graph=True, frozen=True)
        return theta, log_q

    def to_base(self, theta, context=None):
        """Map theta through the density direction; returns the base-space
        point z (numpy). Outside-support rows come back non-finite."""
        context = self._check_context(theta, context)
        u = nd.value_of(theta)
        if self.support is not None:
            u, _, inside = self.support.inverse(u)
            u = np.where(inside[:, None], u, np.nan)
        for layer in self.layers:
            u, _ = layer.fwd(u, context, graph=False)
        return u

    def from_base(self, z, context=None):
        """Invert the stack from base space; returns (theta, log_prob)."""
        context = self._check_context(z, context)
        return self._inverse_stack(np.asarray(z, dtype=np.float64), context, graph=False)

    def perturb(self, rng: np.random.Generator, scale: float = 0.5):
        for layer in self.layers:
            layer.cond.perturb(rng, scale)

    # -- persistence -------------------------------------------------------

    def save(self, path_prefix: str, fmt: str = "binary"):
        self.store.save(f"{path_prefix}.params", fmt=fmt)
        sidecar = {
            "spec": self.spec.to_config(),
            "d": self.d,
            "context_dim": self.context_dim,
            "support": None if self.support is None else self.support.to_config(),
            "name": self.name,
        }
        with open(f"{path_prefix}.json", "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, indent=1)

    @classmethod
    def load(cls, path_prefix: str):
        with open(f"{path_prefix}.json", "r", encoding="utf-8") as fh:
            sidecar = json.load(fh)
        support = (None if sidecar["support"] is None
                   else SupportMap.from_config(sidecar["support"]))
        model = cls(TransformSpec.from_config(sidecar["spec"]), sidecar["d"],
                    context_dim=sidecar["context_dim"], support=support,
                    name=sidecar["name"])
        model.store.load(f"{path_prefix}.params")
        return model


def make_flow(spec: TransformSpec, d: int, context_dim: int = 0,
              support: SupportMap | None = None, seed: int = 0,
              name: str = "flow") -> FlowModel:
    """Build a flow initialized at the exact identity transform."""
    return FlowModel(spec, d, context_dim=context_dim, support=support,
                     seed=seed, name=name)


def flow_sample(model: FlowModel, n: int, rng: np.random.Generator, context=None):
    return model.sample(n, rng, context=context)


def flow_log_prob(model: FlowModel, theta, context=None):
    return model.log_prob(theta, context=context)


def default_posterior_spec(d: int, family: str = "affine") -> TransformSpec:
    """Posterior-net sizing: spline conditioners use two hidden layers of
    10*d units, affine conditioners one hidden layer of 5*d + 5 units."""
    if family == "rqs":
        return TransformSpec(family="rqs", layers=5, hidden=(10 * d, 10 * d))
    return TransformSpec(family="affine", layers=5, hidden=(5 * d + 5,))


def default_likelihood_spec(family: str = "affine") -> TransformSpec:
    return TransformSpec(family=family, layers=5, hidden=(50, 50))
