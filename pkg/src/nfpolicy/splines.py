"""Element-wise monotone transforms with exact log-derivatives.

Rational-quadratic splines follow the Neural Spline Flows construction:
K bins on [-B, B], widths/heights from a floored softmax, interior knot
derivatives from a floored softplus, and unit-slope linear tails outside.
The forward map is written with tape ops so the same code serves training and
evaluation; the inverse is closed-form numpy (sampling never needs gradients).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T

DEFAULT_BINS = 8
DEFAULT_BOUND = 3.0
MIN_BIN = 1e-3
MIN_DERIV = 1e-3


def identity_offset(min_deriv: float = MIN_DERIV) -> float:
    """Shift added to raw derivatives so raw zeros give knot slope exactly 1."""
    return math.log(math.expm1(1.0 - min_deriv))


@dataclass
class RQSplineParams:
    """Unnormalized spline parameters; leading dims broadcast per element."""

    raw_widths: np.ndarray
    raw_heights: np.ndarray
    raw_derivs: np.ndarray
    bound: float = DEFAULT_BOUND

    def __post_init__(self):
        self.raw_widths = np.asarray(self.raw_widths)
        self.raw_heights = np.asarray(self.raw_heights)
        self.raw_derivs = np.asarray(self.raw_derivs)
        k = self.raw_widths.shape[-1]
        if k < 2 or self.raw_heights.shape[-1] != k or self.raw_derivs.shape[-1] != k - 1:
            raise ValueError(f"need K>=2 bins with K-1 interior derivs, got widths {self.raw_widths.shape}, "
                             f"heights {self.raw_heights.shape}, derivs {self.raw_derivs.shape}")
        if not self.bound > 0:
            raise ValueError(f"bound must be positive, got {self.bound}")

    @property
    def num_bins(self) -> int:
        return self.raw_widths.shape[-1]

    @classmethod
    def identity(cls, num_bins: int = DEFAULT_BINS, bound: float = DEFAULT_BOUND, shape=()) -> "RQSplineParams":
        z = np.zeros(tuple(shape) + (num_bins,))
        return cls(z, z.copy(), np.zeros(tuple(shape) + (num_bins - 1,)), bound)

    @classmethod
    def random(cls, rng: np.random.Generator, num_bins: int = DEFAULT_BINS, bound: float = DEFAULT_BOUND,
               shape=(), scale: float = 1.0) -> "RQSplineParams":
        s = tuple(shape)
        return cls(rng.normal(0, scale, s + (num_bins,)), rng.normal(0, scale, s + (num_bins,)),
                   rng.normal(0, scale, s + (num_bins - 1,)), bound)


@dataclass
class Knots:
    xs: np.ndarray  # (..., K+1)
    ys: np.ndarray  # (..., K+1)
    derivs: np.ndarray  # (..., K+1)


@dataclass
class AffineParams:
    alpha: float
    beta: float

    def __post_init__(self):
        if not np.all(np.asarray(self.alpha) > 0):
            raise ValueError("alpha must be strictly positive")

    @classmethod
    def from_raw(cls, raw_log_scale, shift) -> "AffineParams":
        return cls(np.exp(raw_log_scale), shift)


# --- knot construction (tape) -------------------------------------------------

def _bin_edges(raw, bound: float, min_bin: float):
    k = raw.shape[-1]
    frac = T.add(T.mul(T.softmax(raw, axis=-1), 1.0 - min_bin * k), min_bin)
    interior = T.take(T.cumsum(frac, axis=-1), np.arange(k - 1), axis=-1)
    lead = raw.shape[:-1] + (1,)
    return T.concat([T.constant(np.full(lead, -bound)),
                     T.sub(T.mul(interior, 2.0 * bound), bound),
                     T.constant(np.full(lead, bound))], axis=-1)


def knot_tensors(raw_w, raw_h, raw_d, bound: float = DEFAULT_BOUND, min_bin: float = MIN_BIN,
                 min_deriv: float = MIN_DERIV, offset: float | None = None):
    """Knot positions and slopes as tape tensors.

    ``offset`` defaults to the identity offset; pass 0.0 for the plain
    parameterization.
    """
    if offset is None:
        offset = identity_offset(min_deriv)
    xs = _bin_edges(raw_w, bound, min_bin)
    ys = _bin_edges(raw_h, bound, min_bin)
    lead = raw_d.shape[:-1] + (1,)
    ones = T.constant(np.ones(lead))
    inner = T.add(T.softplus(T.add(raw_d, offset)), min_deriv)
    ds = T.concat([ones, inner, ones], axis=-1)
    return xs, ys, ds


def _np_edges(raw: np.ndarray, bound: float, min_bin: float) -> np.ndarray:
    k = raw.shape[-1]
    # reductions over the short bin axis go through matmul, which is much faster in numpy
    tri = np.triu(np.ones((k, k), dtype=raw.dtype))
    e = np.exp(np.minimum(raw - raw @ np.full((k, 1), 1.0 / k, dtype=raw.dtype), 80.0))
    cum = e @ tri
    frac_cum = cum / cum[..., -1:] * (1.0 - min_bin * k) + min_bin * np.arange(1, k + 1, dtype=raw.dtype)
    edges = np.empty(raw.shape[:-1] + (k + 1,), dtype=raw.dtype)
    edges[..., 0] = -bound
    edges[..., 1:k] = frac_cum[..., :k - 1] * (2.0 * bound) - bound
    edges[..., k] = bound
    return edges


def knots_np(raw_w, raw_h, raw_d, bound: float = DEFAULT_BOUND, min_bin: float = MIN_BIN,
             min_deriv: float = MIN_DERIV, offset: float | None = None) -> Knots:
    """Same construction as :func:`knot_tensors` without the tape, for inference."""
    if offset is None:
        offset = identity_offset(min_deriv)
    raw_d = np.asarray(raw_d)
    ds = np.ones(raw_d.shape[:-1] + (raw_d.shape[-1] + 2,), dtype=raw_d.dtype)
    z = raw_d + offset
    ds[..., 1:-1] = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z))) + min_deriv
    return Knots(_np_edges(np.asarray(raw_w), bound, min_bin), _np_edges(np.asarray(raw_h), bound, min_bin), ds)


def normalize_params(params: RQSplineParams, min_bin: float = MIN_BIN, min_deriv: float = MIN_DERIV,
                     use_identity_offset: bool = True) -> Knots:
    return knots_np(params.raw_widths, params.raw_heights, params.raw_derivs, params.bound, min_bin, min_deriv,
                    None if use_identity_offset else 0.0)


# --- forward (tape) ----------------------------------------------------------

def _locate(knots: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bin index of each value; values outside the range land in the edge bins."""
    k = knots.shape[-1] - 1
    interior = knots[..., 1:k]
    return (v[..., None] >= interior).sum(axis=-1)


def _gather(t, idx):
    g = T.take_along(t, idx[..., None], axis=-1)
    return T.reshape(g, idx.shape)


def spline_forward(x, raw_w, raw_h, raw_d, bound: float = DEFAULT_BOUND, min_bin: float = MIN_BIN,
                   min_deriv: float = MIN_DERIV, offset: float | None = None):
    """Rational-quadratic spline on tape tensors.

    ``x`` has shape (..., ); raw params (..., K) and (..., K-1).  Returns
    ``(y, log_abs_deriv)`` with the shape of ``x``.
    """
    x = T.constant(x)
    xs, ys, ds = knot_tensors(raw_w, raw_h, raw_d, bound, min_bin, min_deriv, offset)
    inside = (x.data >= -bound) & (x.data <= bound)
    all_inside = bool(inside.all())
    xin = x if all_inside else T.where(inside, x, np.zeros_like(x.data))
    idx = _locate(xs.data, xin.data)
    idx1 = idx + 1

    xk = _gather(xs, idx)
    wk = T.sub(_gather(xs, idx1), xk)
    yk = _gather(ys, idx)
    hk = T.sub(_gather(ys, idx1), yk)
    dk = _gather(ds, idx)
    dk1 = _gather(ds, idx1)

    s = T.div(hk, wk)
    xi = T.div(T.sub(xin, xk), wk)
    one_m = T.sub(1.0, xi)
    mix = T.mul(xi, one_m)
    curv = T.sub(T.add(dk1, dk), T.mul(s, 2.0))
    num = T.mul(hk, T.add(T.mul(s, T.square(xi)), T.mul(dk, mix)))
    den = T.add(s, T.mul(curv, mix))
    y = T.add(yk, T.div(num, den))
    dnum = T.mul(T.square(s), T.add(T.add(T.mul(dk1, T.square(xi)), T.mul(T.mul(s, 2.0), mix)),
                                    T.mul(dk, T.square(one_m))))
    logd = T.sub(T.log(dnum), T.mul(T.log(den), 2.0))

    if all_inside:
        return y, logd
    y = T.where(inside, y, x)
    logd = T.where(inside, logd, np.zeros_like(x.data))
    return y, logd


# --- inverse (numpy) ---------------------------------------------------------

def spline_inverse_knots(y: np.ndarray, knots: Knots, bound: float):
    """Invert given normalized knots; returns ``(x, log f'(x))``."""
    y = np.asarray(y)
    xs, ys, ds = knots.xs, knots.ys, knots.derivs
    inside = (y >= -bound) & (y <= bound)
    all_inside = bool(inside.all())
    yin = y if all_inside else np.where(inside, y, 0.0)
    k1 = xs.shape[-1]
    flat = (np.arange(yin.size).reshape(yin.shape) * k1 + _locate(ys, yin)).ravel()
    xf, yf, df = xs.reshape(-1), ys.reshape(-1), ds.reshape(-1)
    xk = xf[flat].reshape(yin.shape)
    wk = xf[flat + 1].reshape(yin.shape) - xk
    yk = yf[flat].reshape(yin.shape)
    hk = yf[flat + 1].reshape(yin.shape) - yk
    dk = df[flat].reshape(yin.shape)
    dk1 = df[flat + 1].reshape(yin.shape)

    s = hk / wk
    dy = yin - yk
    curv = dk1 + dk - 2.0 * s
    a = hk * (s - dk) + dy * curv
    b = hk * dk - dy * curv
    c = -s * dy
    disc = np.maximum(b * b - 4.0 * a * c, 0.0)
    # stable root: 2c / (-b - sqrt(disc)) avoids cancellation when a ~ 0
    xi = (2.0 * c) / (-b - np.sqrt(disc))
    x = xi * wk + xk

    mix = xi * (1.0 - xi)
    den = s + curv * mix
    dnum = s * s * (dk1 * xi * xi + 2.0 * s * mix + dk * (1.0 - xi) ** 2)
    logd = np.log(dnum) - 2.0 * np.log(den)
    if all_inside:
        return x, logd
    return np.where(inside, x, y), np.where(inside, logd, 0.0)


# --- scalar/array API ----------------------------------------------------------
# These keep the caller's float precision: python floats run in double.

def _dtype_of(a: np.ndarray):
    return a.dtype if a.dtype == np.float32 else np.dtype(np.float64)


def rq_forward(x, params: RQSplineParams):
    """Apply the spline element-wise; returns ``(y, log f'(x))`` as arrays."""
    x = np.asarray(x)
    p = _broadcast(params, x.shape)
    with T.no_grad(), T.precision(_dtype_of(x)):
        y, logd = spline_forward(T.constant(x), T.constant(p.raw_widths), T.constant(p.raw_heights),
                                 T.constant(p.raw_derivs), p.bound)
    return _unwrap(y.data), _unwrap(logd.data)


def rq_inverse(y, params: RQSplineParams):
    """Inverse spline; the log-derivative is that of the forward map at the result."""
    y = np.asarray(y)
    dt = _dtype_of(y)
    knots = normalize_params(_broadcast(params, y.shape))
    knots = Knots(knots.xs.astype(dt), knots.ys.astype(dt), knots.derivs.astype(dt))
    y = y.astype(dt)
    x, logd = spline_inverse_knots(y, knots, params.bound)
    return _unwrap(x), _unwrap(logd)


def _broadcast(params: RQSplineParams, shape) -> RQSplineParams:
    k = params.num_bins
    return RQSplineParams(np.broadcast_to(params.raw_widths, tuple(shape) + (k,)),
                          np.broadcast_to(params.raw_heights, tuple(shape) + (k,)),
                          np.broadcast_to(params.raw_derivs, tuple(shape) + (k - 1,)), params.bound)


def affine_forward(x, p: AffineParams):
    x = np.asarray(x)
    return _unwrap(x * p.alpha + p.beta), _unwrap(np.broadcast_to(np.log(p.alpha), np.shape(x)) + 0.0)


def affine_inverse(y, p: AffineParams):
    y = np.asarray(y)
    return _unwrap((y - p.beta) / p.alpha), _unwrap(np.broadcast_to(np.log(p.alpha), np.shape(y)) + 0.0)


def _unwrap(a):
    a = np.asarray(a)
    return a.item() if a.ndim == 0 else a
