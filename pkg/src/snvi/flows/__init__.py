"""Normalizing flows: autoregressive affine/spline transforms with
context conditioning and support-mapping bijections."""

from .made import MaskedConditioner
from .model import (
    ConfigError,
    FlowModel,
    TransformSpec,
    default_likelihood_spec,
    default_posterior_spec,
    flow_log_prob,
    flow_sample,
    make_flow,
)
from .support import SupportMap
from .transforms import AffineTransform, RationalQuadraticSpline, scale_to_raw

__all__ = [
    "AffineTransform",
    "ConfigError",
    "FlowModel",
    "MaskedConditioner",
    "RationalQuadraticSpline",
    "SupportMap",
    "TransformSpec",
    "default_likelihood_spec",
    "default_posterior_spec",
    "flow_log_prob",
    "flow_sample",
    "make_flow",
    "scale_to_raw",
]
