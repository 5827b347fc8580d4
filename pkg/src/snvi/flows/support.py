"""Bijections from unconstrained space onto a prior's support.

The flow core lives on R^d; a SupportMap squashes its output onto the
prior support (box via scaled sigmoid, half-lines via exp-shift), so
every sample lands strictly inside the support by construction and no
probability mass can leak out.
"""

from __future__ import annotations

import numpy as np

from .. import ndiff as nd

_EXP_CLIP = 700.0  # keeps discarded where-branches finite so vjps stay clean


class SupportMap:
    """Per-dimension map y in R -> theta in (low, high).

    low/high entries may be -inf/+inf; the four kinds (unbounded, lower,
    upper, box) are selected per dimension.
    """

    def __init__(self, low, high):
        self.low = np.asarray(low, dtype=np.float64)
        self.high = np.asarray(high, dtype=np.float64)
        if self.low.shape != self.high.shape or self.low.ndim != 1:
            raise nd.DimensionError(
                f"support bounds must be matching 1-d arrays, got {self.low.shape} "
                f"and {self.high.shape}"
            )
        if np.any(self.low >= self.high):
            raise ValueError("support requires low < high per dimension")
        self._lo_fin = np.isfinite(self.low)
        self._hi_fin = np.isfinite(self.high)
        self._box = self._lo_fin & self._hi_fin
        self._lower = self._lo_fin & ~self._hi_fin
        self._upper = ~self._lo_fin & self._hi_fin
        self._ident = ~self._lo_fin & ~self._hi_fin
        self.is_identity = bool(np.all(self._ident))

    @property
    def d(self):
        return self.low.shape[0]

    def forward(self, y):
        """Map unconstrained y to support; returns (theta, logdet_elem)."""
        if self.is_identity:
            zero = nd.mul(y, 0.0) if nd.is_node(y) else np.zeros_like(y)
            return y, zero
        lo = np.where(self._lo_fin, self.low, 0.0)
        hi = np.where(self._hi_fin, self.high, 0.0)
        width = np.where(self._box, hi - lo, 1.0)

        yc = nd.clip(y, -_EXP_CLIP, _EXP_CLIP)
        s = nd.sigmoid(yc)
        theta_box = nd.add(lo, nd.mul(width, s))
        ld_box = nd.sub(np.log(width),
                        nd.add(nd.softplus(yc), nd.softplus(nd.neg(yc))))
        e = nd.exp(yc)
        theta_lower = nd.add(lo, e)
        theta_upper = nd.sub(hi, e)

        theta = nd.where(self._box, theta_box,
                         nd.where(self._lower, theta_lower,
                                  nd.where(self._upper, theta_upper, y)))
        ld = nd.where(self._box, ld_box, nd.where(self._ident, 0.0, yc))
        return theta, ld

    def inverse(self, theta):
        """Map theta back to unconstrained space.

        Returns (y, logdet_elem, inside) where inside flags rows strictly
        interior to the support; y/logdet on outside rows are unusable.
        """
        tv = nd.value_of(theta)
        inside = np.all((tv > self.low) & (tv < self.high), axis=-1)
        if self.is_identity:
            zero = nd.mul(theta, 0.0) if nd.is_node(theta) else np.zeros_like(tv)
            return theta, zero, inside

        lo = np.where(self._lo_fin, self.low, 0.0)
        hi = np.where(self._hi_fin, self.high, 0.0)
        width = np.where(self._box, hi - lo, 1.0)
        tiny = 1e-300

        with np.errstate(divide="ignore", invalid="ignore"):
            t = nd.clip(nd.div(nd.sub(theta, lo), width), tiny, 1.0 - 1e-16)
            y_box = nd.sub(nd.log(t), nd.log(nd.sub(1.0, t)))
            ld_box = nd.neg(nd.add(np.log(width), nd.add(nd.log(t), nd.log(nd.sub(1.0, t)))))
            gap_lo = nd.maximum(nd.sub(theta, lo), tiny)
            gap_hi = nd.maximum(nd.sub(hi, theta), tiny)
            y_lower = nd.log(gap_lo)
            y_upper = nd.log(gap_hi)

        y = nd.where(self._box, y_box,
                     nd.where(self._lower, y_lower,
                              nd.where(self._upper, y_upper, theta)))
        ld = nd.where(self._box, ld_box,
                      nd.where(self._lower, nd.neg(y_lower),
                               nd.where(self._upper, nd.neg(y_upper), 0.0)))
        return y, ld, inside

    def to_config(self):
        def enc(v):
            return [None if not np.isfinite(x) else float(x) for x in v]

        return {"low": enc(self.low), "high": enc(self.high)}

    @classmethod
    def from_config(cls, cfg):
        low = [(-np.inf if v is None else v) for v in cfg["low"]]
        high = [(np.inf if v is None else v) for v in cfg["high"]]
        return cls(low, high)
