"""Conditional coupling flow with exact log-likelihood.

Layers alternate between transforming the even and the odd coordinates of
the flattened action window.  Each layer's conditioner sees the untouched half
plus the condition vector and emits per-coordinate spline (or affine)
parameters through one zero-initialized head per parameter group, so a fresh
model is exactly the identity map.

Public methods take and return raw-space actions; internally everything runs
on z-scored actions and conditions, and log-densities are reported in that
normalized space.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import MLP, Module
from .splines import DEFAULT_BINS, DEFAULT_BOUND, knots_np, spline_forward, spline_inverse_knots

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
STD_FLOOR = 1e-3


@dataclass
class FlowConfig:
    dim: int
    cond_dim: int
    n_layers: int = 10
    hidden: int = 2048
    bins: int = DEFAULT_BINS
    bound: float = DEFAULT_BOUND
    transform: str = "rq"  # "rq" | "affine"
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1 or self.cond_dim < 0 or self.n_layers < 1 or self.hidden < 1:
            raise ValueError(f"invalid flow config {self}")
        if self.transform not in ("rq", "affine"):
            raise ValueError(f"unknown transform {self.transform!r}")


class CouplingLayer(Module):
    def __init__(self, dim: int, cond_dim: int, parity: int, hidden: int, bins: int, bound: float,
                 transform: str, rng: np.random.Generator):
        idx = np.arange(dim)
        self.parity = parity
        self.t_idx = idx[parity::2]
        self.c_idx = idx[1 - parity::2]
        self.order = np.argsort(np.concatenate([self.t_idx, self.c_idx]))
        self.bins = bins
        self.bound = bound
        self.transform = transform
        n_t = len(self.t_idx)
        if transform == "rq":
            heads = (n_t * bins, n_t * bins, n_t * (bins - 1))
        else:
            heads = (n_t, n_t)
        self.net = MLP(len(self.c_idx) + cond_dim, hidden, heads, rng, zero_heads=True) if n_t else None

    def parameters(self) -> list:
        return self.net.parameters() if self.net is not None else []

    def _raw(self, outs, n: int):
        n_t = len(self.t_idx)
        if self.transform == "rq":
            k = self.bins
            return [outs[0].reshape(n, n_t, k), outs[1].reshape(n, n_t, k), outs[2].reshape(n, n_t, k - 1)]
        return outs

    def forward(self, x: T.Tensor, cond: T.Tensor):
        """Returns ``(y, logdet)`` with ``logdet`` of shape (N,)."""
        n = x.shape[0]
        if self.net is None:
            return x, T.constant(np.zeros(n))
        xt = T.take(x, self.t_idx, axis=1)
        xc = T.take(x, self.c_idx, axis=1)
        outs = self.net(T.concat([xc, cond], axis=1))
        n_t = len(self.t_idx)
        if self.transform == "rq":
            k = self.bins
            rw = T.reshape(outs[0], (n, n_t, k))
            rh = T.reshape(outs[1], (n, n_t, k))
            rd = T.reshape(outs[2], (n, n_t, k - 1))
            yt, ld = spline_forward(xt, rw, rh, rd, self.bound)
        else:
            log_scale, shift = outs
            yt = T.add(T.mul(xt, T.exp(log_scale)), shift)
            ld = log_scale
        y = T.take(T.concat([yt, xc], axis=1), self.order, axis=1)
        return y, T.sum(ld, axis=1)

    def inverse(self, y: np.ndarray, cond: np.ndarray):
        """Numpy inverse; returns ``(x, logdet of forward at x)``."""
        n = y.shape[0]
        if self.net is None:
            return y, np.zeros(n, dtype=y.dtype)
        yt = y[:, self.t_idx]
        xc = y[:, self.c_idx]
        outs = self._raw(self.net.np_forward(np.concatenate([xc, cond], axis=1)), n)
        if self.transform == "rq":
            xt, ld = spline_inverse_knots(yt, knots_np(*outs, bound=self.bound), self.bound)
        else:
            log_scale, shift = outs
            xt = (yt - shift) * np.exp(-log_scale)
            ld = log_scale
        x = np.empty_like(y)
        x[:, self.t_idx] = xt
        x[:, self.c_idx] = xc
        return x, ld.sum(axis=1)


class FlowModel(Module):
    """Stack of coupling layers over a standard-normal base."""

    def __init__(self, config: FlowConfig):
        self.config = config
        rng = np.random.Generator(np.random.PCG64(config.seed))
        self.layers = [CouplingLayer(config.dim, config.cond_dim, i % 2, config.hidden, config.bins,
                                     config.bound, config.transform, rng) for i in range(config.n_layers)]
        dt = T.default_dtype()
        self.x_mean = np.zeros(config.dim, dtype=dt)
        self.x_std = np.ones(config.dim, dtype=dt)
        self.c_mean = np.zeros(config.cond_dim, dtype=dt)
        self.c_std = np.ones(config.cond_dim, dtype=dt)

    @property
    def dim(self) -> int:
        return self.config.dim

    @property
    def cond_dim(self) -> int:
        return self.config.cond_dim

    def parameters(self) -> list:
        ps = []
        for layer in self.layers:
            ps += layer.parameters()
        return ps

    def astype(self, dtype):
        super().astype(dtype)
        for name in ("x_mean", "x_std", "c_mean", "c_std"):
            setattr(self, name, getattr(self, name).astype(dtype))
        return self

    def network_evals(self) -> int:
        return sum(layer.net.calls for layer in self.layers if layer.net is not None)

    def reset_eval_counter(self):
        for layer in self.layers:
            if layer.net is not None:
                layer.net.calls = 0

    # --- normalization -----------------------------------------------------

    def fit_normalization(self, x: np.ndarray, cond: np.ndarray):
        dt = self.x_mean.dtype
        x = np.asarray(x, dtype=np.float64)
        cond = np.asarray(cond, dtype=np.float64).reshape(len(x), -1)
        self.x_mean = x.mean(axis=0).astype(dt)
        self.x_std = np.maximum(x.std(axis=0), STD_FLOOR).astype(dt)
        if self.cond_dim:
            self.c_mean = cond.mean(axis=0).astype(dt)
            self.c_std = np.maximum(cond.std(axis=0), STD_FLOOR).astype(dt)

    def normalize_x(self, x):
        return (x - self.x_mean) / self.x_std

    def denormalize_x(self, xn):
        return xn * self.x_std + self.x_mean

    def normalize_cond(self, cond):
        return (cond - self.c_mean) / self.c_std

    def _prep(self, x, cond):
        x = np.asarray(x, dtype=T.default_dtype())
        single = x.ndim == 1
        x = x.reshape(-1, self.dim) if not single else x[None, :]
        if x.shape[1] != self.dim:
            raise T.ShapeError("flow input", x.shape, (self.dim,))
        c = self._prep_cond(cond, len(x))
        if not (np.isfinite(x).all() and np.isfinite(c).all()):
            raise T.NonFiniteError("non-finite input to flow")
        return x, c, single

    def _prep_cond(self, cond, n: int) -> np.ndarray:
        if cond is None:
            cond = np.zeros((n, self.cond_dim))
        c = np.asarray(cond, dtype=T.default_dtype())
        if c.ndim == 1:
            c = np.broadcast_to(c, (n, c.shape[0]))
        if c.shape != (n, self.cond_dim):
            raise T.ShapeError("flow condition", c.shape, (n, self.cond_dim))
        return c

    # --- normalized-space core ----------------------------------------------

    def forward_t(self, xn: T.Tensor, cn: T.Tensor):
        """Tape forward ``u = T(xn | cn)``; returns ``(u, logdet)``."""
        total = None
        h = xn
        for layer in self.layers:
            h, ld = layer.forward(h, cn)
            total = ld if total is None else T.add(total, ld)
        return h, total

    def log_prob_t(self, xn: T.Tensor, cn: T.Tensor) -> T.Tensor:
        u, logdet = self.forward_t(xn, cn)
        base = T.sub(T.mul(T.sum(T.square(u), axis=1), -0.5), 0.5 * self.dim * LOG_2PI)
        return T.add(base, logdet)

    def inverse_n(self, u: np.ndarray, cn: np.ndarray):
        """Numpy inverse in normalized space; returns ``(xn, forward logdet)``."""
        h = u
        total = np.zeros(len(u), dtype=u.dtype)
        for layer in reversed(self.layers):
            h, ld = layer.inverse(h, cn)
            total = total + ld
        return h, total

    def log_prob_n(self, xn: np.ndarray, cn: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self.log_prob_t(T.constant(xn), T.constant(cn)).data

    def grad_log_prob_n(self, xn: np.ndarray, cn: np.ndarray):
        """Per-row gradient of the normalized log-density w.r.t. ``xn``."""
        xt = T.tensor(xn, requires_grad=True)
        lp = self.log_prob_t(xt, T.constant(cn))
        T.backward(T.sum(lp))
        return lp.data, xt.grad

    # --- raw-space API -------------------------------------------------------

    def flow_forward(self, x, cond=None):
        x, c, single = self._prep(x, cond)
        with T.no_grad():
            u, logdet = self.forward_t(T.constant(self.normalize_x(x)), T.constant(self.normalize_cond(c)))
        return (u.data[0], float(logdet.data[0])) if single else (u.data, logdet.data)

    def flow_inverse(self, u, cond=None):
        u = np.asarray(u, dtype=T.default_dtype())
        single = u.ndim == 1
        u2 = u[None, :] if single else u
        c = self.normalize_cond(self._prep_cond(cond, len(u2)))
        xn, logdet = self.inverse_n(u2, c)
        x = self.denormalize_x(xn)
        return (x[0], float(logdet[0])) if single else (x, logdet)

    def log_prob(self, x, cond=None):
        x, c, single = self._prep(x, cond)
        lp = self.log_prob_n(self.normalize_x(x), self.normalize_cond(c))
        return float(lp[0]) if single else lp

    def grad_logprob_x(self, x, cond=None):
        """Gradient of the (normalized-space) log-density w.r.t. raw ``x``."""
        x, c, single = self._prep(x, cond)
        _, g = self.grad_log_prob_n(self.normalize_x(x), self.normalize_cond(c))
        g = g / self.x_std
        return g[0] if single else g

    def sample(self, n: int, sigma: float, cond=None, rng: np.random.Generator | None = None):
        """Draw ``n`` windows via ``u ~ N(0, sigma^2 I)``; returns ``(x, log_prob)``."""
        if sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {sigma}")
        rng = rng if rng is not None else np.random.Generator(np.random.PCG64(0))
        u = (sigma * rng.standard_normal((n, self.dim))).astype(T.default_dtype())
        return self.sample_from_base(u, cond)

    def sample_from_base(self, u: np.ndarray, cond=None):
        c = self.normalize_cond(self._prep_cond(cond, len(u)))
        xn, logdet = self.inverse_n(u, c)
        lp = -0.5 * np.sum(u * u, axis=1) - 0.5 * self.dim * LOG_2PI + logdet
        return self.denormalize_x(xn), lp


# --- training ------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Staged mini-batch schedule: ``stages`` is a list of (epochs, batch_size)."""

    stages: list = field(default_factory=lambda: [(100, 128), (100, 256), (100, 512)])
    lr: float = 1e-4
    seed: int = 0
    jitter: float = 0.0  # std of Gaussian noise added to normalized targets
    max_steps_per_epoch: int | None = None

    @property
    def epochs(self) -> int:
        return int(sum(e for e, _ in self.stages))


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator, limit: int | None = None):
    perm = rng.permutation(n)
    bs = max(1, min(batch_size, n))
    starts = range(0, n, bs)
    for i, s in enumerate(starts):
        if limit is not None and i >= limit:
            break
        yield perm[s:s + bs]


def train_flow(model: FlowModel, x: np.ndarray, cond: np.ndarray | None, config: TrainConfig,
               fit_stats: bool = True, callback=None) -> list:
    """Maximum-likelihood training with Adam; returns per-epoch mean NLL."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    if len(x) == 0:
        raise ValueError("empty dataset")
    cond = np.zeros((len(x), 0)) if cond is None else np.asarray(cond, dtype=np.float64).reshape(len(x), -1)
    if fit_stats:
        model.fit_normalization(x, cond)
    dt = T.default_dtype()
    xn = model.normalize_x(x).astype(dt)
    cn = model.normalize_cond(cond).astype(dt)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    opt = T.Adam(model.parameters(), lr=config.lr)
    losses = []
    epoch = 0
    t0 = time.perf_counter()
    for n_epochs, bs in config.stages:
        for _ in range(n_epochs):
            total, count = 0.0, 0
            for b, idx in enumerate(iterate_batches(len(xn), bs, rng, config.max_steps_per_epoch)):
                xb = xn[idx]
                if config.jitter > 0:
                    xb = (xb + config.jitter * rng.standard_normal(xb.shape)).astype(dt)
                opt.zero_grad()
                nll = T.neg(T.mean(model.log_prob_t(T.constant(xb), T.constant(cn[idx]))))
                if not np.isfinite(nll.data):
                    raise T.TrainingDivergedError(
                        f"NaN/inf loss at epoch {epoch}, batch {b}, lr {config.lr}")
                T.backward(nll)
                try:
                    opt.step()
                except T.TrainingDivergedError as e:
                    raise T.TrainingDivergedError(f"{e} (epoch {epoch}, batch {b}, lr {config.lr})") from None
                total += float(nll.data) * len(idx)
                count += len(idx)
            losses.append(total / count)
            if callback is not None:
                callback(epoch, losses[-1])
            epoch += 1
    log.debug("flow training: %d epochs in %.1fs, final NLL %.4f", epoch, time.perf_counter() - t0, losses[-1])
    return losses
