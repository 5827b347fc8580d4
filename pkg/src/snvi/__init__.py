"""snvi: sequential neural variational inference for simulators.

Learn a surrogate likelihood (or likelihood ratio) from simulations, fit
a normalizing-flow posterior to the resulting unnormalized potential with
a mass-covering variational objective, refine samples with sampling
importance resampling, and correct for simulators that produce invalid
outputs.
"""

__version__ = "0.1.0"
