"""Elementwise transform families for autoregressive flow layers.

Both families are parameterized so that all-zero conditioner outputs give
the exact identity map, which is what a zero-initialized conditioner head
produces. The density direction is u -> v (data towards base); `inv` is
the sampling direction.

`fwd`/`inv` operate elementwise on (n, d) inputs with (n, d, P) parameter
slabs and return (output, logdet_elem) with per-element log |dv/du|
(respectively log |du/dv|).
"""

from __future__ import annotations

import numpy as np

from .. import ndiff as nd

# (softplus(x + _AFFINE_OFFSET) + _MIN_SCALE) / _AFFINE_NORM == 1 at x == 0,
# and the scale stays >= ~1e-3 no matter how negative the raw output gets.
_AFFINE_OFFSET = float(np.log(np.e - 1.0))
_MIN_SCALE = 1e-3
_AFFINE_NORM = float(np.logaddexp(0.0, _AFFINE_OFFSET)) + _MIN_SCALE

_MIN_BIN = 1e-3
_MIN_DERIVATIVE = 1e-3
# softplus(_DERIV_OFFSET) + _MIN_DERIVATIVE == 1 at zero raw parameters
_DERIV_OFFSET = float(np.log(np.expm1(1.0 - _MIN_DERIVATIVE)))


class AffineTransform:
    """Shift-and-scale with a softplus-positive scale."""

    n_params = 2

    def _shift_scale(self, params):
        shift = nd.take(params, (Ellipsis, 0))
        raw = nd.take(params, (Ellipsis, 1))
        scale = nd.div(nd.add(nd.softplus(nd.add(raw, _AFFINE_OFFSET)), _MIN_SCALE),
                       _AFFINE_NORM)
        return shift, scale

    def fwd(self, u, params):
        shift, scale = self._shift_scale(params)
        v = nd.div(nd.sub(u, shift), scale)
        return v, nd.neg(nd.log(scale))

    def inv(self, v, params):
        shift, scale = self._shift_scale(params)
        u = nd.add(nd.mul(v, scale), shift)
        return u, nd.log(scale)


def scale_to_raw(scale):
    """Raw conditioner output that yields the given affine scale."""
    return np.log(np.expm1(np.asarray(scale) * _AFFINE_NORM - _MIN_SCALE)) - _AFFINE_OFFSET


class RationalQuadraticSpline:
    """Monotone rational-quadratic spline with identity tails.

    K bins on [-tail_bound, tail_bound]; K widths + K heights + K-1
    interior derivatives per dimension. Boundary derivatives are pinned
    to 1 so the map is C1 at the tails.
    """

    def __init__(self, bins: int = 8, tail_bound: float = 5.0):
        self.bins = bins
        self.tail_bound = tail_bound
        self.n_params = 3 * bins - 1

    def _knots(self, params):
        K, B = self.bins, self.tail_bound
        w_raw = nd.take(params, (Ellipsis, slice(0, K)))
        h_raw = nd.take(params, (Ellipsis, slice(K, 2 * K)))
        d_raw = nd.take(params, (Ellipsis, slice(2 * K, None)))

        widths = nd.add(_MIN_BIN, nd.mul(1.0 - K * _MIN_BIN, nd.softmax(w_raw, axis=-1)))
        heights = nd.add(_MIN_BIN, nd.mul(1.0 - K * _MIN_BIN, nd.softmax(h_raw, axis=-1)))

        shape_one = nd.value_of(w_raw).shape[:-1] + (1,)
        lo = np.full(shape_one, -B)
        hi = np.full(shape_one, B)
        # endpoints pinned exactly at +-B; interior knots from the cumsum
        cw = nd.cumsum(nd.mul(widths, 2.0 * B), axis=-1)
        knots_x = nd.concat([lo, nd.add(-B, nd.take(cw, (Ellipsis, slice(0, K - 1)))), hi], axis=-1)
        ch = nd.cumsum(nd.mul(heights, 2.0 * B), axis=-1)
        knots_y = nd.concat([lo, nd.add(-B, nd.take(ch, (Ellipsis, slice(0, K - 1)))), hi], axis=-1)

        ones = np.ones(shape_one)
        interior = nd.add(nd.softplus(nd.add(d_raw, _DERIV_OFFSET)), _MIN_DERIVATIVE)
        derivs = nd.concat([ones, interior, ones], axis=-1)
        return knots_x, knots_y, derivs

    @staticmethod
    def _bin_index(knots_vals, x_vals, bins):
        idx = np.sum(knots_vals <= x_vals[..., None], axis=-1) - 1
        return np.clip(idx, 0, bins - 1)[..., None]

    def _gather_bin(self, knots_x, knots_y, derivs, idx):
        xk = nd.gather(knots_x, idx)
        xk1 = nd.gather(knots_x, idx + 1)
        yk = nd.gather(knots_y, idx)
        yk1 = nd.gather(knots_y, idx + 1)
        dk = nd.gather(derivs, idx)
        dk1 = nd.gather(derivs, idx + 1)
        w = nd.sub(xk1, xk)
        h = nd.sub(yk1, yk)
        s = nd.div(h, w)
        return xk, yk, w, h, s, dk, dk1

    def _squeeze(self, x):
        return nd.take(x, (Ellipsis, 0))

    def fwd(self, u, params):
        B = self.tail_bound
        knots_x, knots_y, derivs = self._knots(params)
        uv = nd.value_of(u)
        inside = (uv >= -B) & (uv <= B)
        idx = self._bin_index(nd.value_of(knots_x), uv, self.bins)
        xk, yk, w, h, s, dk, dk1 = self._gather_bin(knots_x, knots_y, derivs, idx)

        u_col = nd.reshape(u, uv.shape + (1,))
        xi = nd.clip(nd.div(nd.sub(u_col, xk), w), 0.0, 1.0)
        xi1m = nd.sub(1.0, xi)
        cross = nd.add(nd.add(dk1, dk), nd.mul(-2.0, s))
        denom = nd.add(s, nd.mul(cross, nd.mul(xi, xi1m)))
        num = nd.mul(h, nd.add(nd.mul(s, nd.square(xi)), nd.mul(dk, nd.mul(xi, xi1m))))
        v_in = nd.add(yk, nd.div(num, denom))
        deriv_num = nd.mul(nd.square(s),
                           nd.add(nd.mul(dk1, nd.square(xi)),
                                  nd.add(nd.mul(2.0, nd.mul(s, nd.mul(xi, xi1m))),
                                         nd.mul(dk, nd.square(xi1m)))))
        ld_in = nd.sub(nd.log(deriv_num), nd.mul(2.0, nd.log(denom)))

        v = nd.where(inside, self._squeeze(v_in), u)
        ld = nd.where(inside, self._squeeze(ld_in), 0.0)
        return v, ld

    def inv(self, v, params):
        B = self.tail_bound
        knots_x, knots_y, derivs = self._knots(params)
        vv = nd.value_of(v)
        inside = (vv >= -B) & (vv <= B)
        idx = self._bin_index(nd.value_of(knots_y), vv, self.bins)
        xk, yk, w, h, s, dk, dk1 = self._gather_bin(knots_x, knots_y, derivs, idx)

        v_col = nd.reshape(v, vv.shape + (1,))
        dy = nd.clip(nd.sub(v_col, yk), 0.0, nd.value_of(h))
        cross = nd.add(nd.add(dk1, dk), nd.mul(-2.0, s))
        a = nd.add(nd.mul(h, nd.sub(s, dk)), nd.mul(dy, cross))
        b = nd.sub(nd.mul(h, dk), nd.mul(dy, cross))
        c = nd.neg(nd.mul(s, dy))
        disc = nd.maximum(nd.sub(nd.square(b), nd.mul(4.0, nd.mul(a, c))), 0.0)
        xi = nd.div(nd.mul(2.0, c), nd.neg(nd.add(b, nd.sqrt(disc))))
        xi = nd.clip(xi, 0.0, 1.0)
        u_in = nd.add(xk, nd.mul(xi, w))

        xi1m = nd.sub(1.0, xi)
        denom = nd.add(s, nd.mul(cross, nd.mul(xi, xi1m)))
        deriv_num = nd.mul(nd.square(s),
                           nd.add(nd.mul(dk1, nd.square(xi)),
                                  nd.add(nd.mul(2.0, nd.mul(s, nd.mul(xi, xi1m))),
                                         nd.mul(dk, nd.square(xi1m)))))
        ld_in = nd.sub(nd.mul(2.0, nd.log(denom)), nd.log(deriv_num))

        u = nd.where(inside, self._squeeze(u_in), v)
        ld = nd.where(inside, self._squeeze(ld_in), 0.0)
        return u, ld
