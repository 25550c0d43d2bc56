"""DDPM noise-prediction baseline with DDPM and DDIM samplers.

Timesteps are 0-based: ``alpha_bar[i] = prod(alphas[:i + 1])`` and sampling
starts from the last index.  The network runs on z-scored actions and
conditions, like the flow.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .flow import STD_FLOOR, TrainConfig, iterate_batches
from .nn import MLP, Module

log = logging.getLogger(__name__)

EMBED_DIM = 64


@dataclass
class NoiseSchedule:
    alphas: np.ndarray

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=np.float64)
        if self.alphas.ndim != 1 or len(self.alphas) < 1:
            raise ValueError("alphas must be a non-empty 1-D array")
        if np.any(self.alphas < 0) or np.any(self.alphas > 1):
            raise ValueError("alphas must lie in [0, 1]")
        self.alpha_bars = np.cumprod(self.alphas)

    @property
    def n_steps(self) -> int:
        return len(self.alphas)

    @classmethod
    def cosine(cls, n_steps: int = 100, s: float = 0.008, min_alpha_bar: float = 1e-5) -> "NoiseSchedule":
        """Squared-cosine schedule, with the cumulative product floored at ``min_alpha_bar``."""
        t = np.arange(n_steps + 1) / n_steps
        f = np.cos((t + s) / (1 + s) * math.pi / 2) ** 2
        abar = np.maximum(f[1:] / f[0], min_alpha_bar)
        prev = np.concatenate([[1.0], abar[:-1]])
        return cls(abar / prev)

    @classmethod
    def from_alpha_bars(cls, alpha_bars) -> "NoiseSchedule":
        abar = np.asarray(alpha_bars, dtype=np.float64)
        prev = np.concatenate([[1.0], abar[:-1]])
        with np.errstate(divide="ignore", invalid="ignore"):
            alphas = np.where(prev > 0, abar / prev, 0.0)
        sched = cls(alphas)
        sched.alpha_bars = abar.copy()
        return sched

    def check_index(self, i):
        i = np.asarray(i)
        if np.any(i < 0) or np.any(i >= self.n_steps):
            raise IndexError(f"diffusion step {i} outside [0, {self.n_steps})")


def diffuse(x0, i, eps, schedule: NoiseSchedule):
    """Sample ``x_i`` given ``x_0``: sqrt(abar_i) x0 + sqrt(1 - abar_i) eps."""
    schedule.check_index(i)
    abar = schedule.alpha_bars[np.asarray(i)]
    x0 = np.asarray(x0)
    if np.ndim(abar) == 1 and x0.ndim == 2:
        abar = abar[:, None]
    return (np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * np.asarray(eps)).astype(x0.dtype, copy=False)


def timestep_embedding(i, dim: int = EMBED_DIM) -> np.ndarray:
    i = np.atleast_1d(np.asarray(i, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    arg = i[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


class EpsilonNet(Module):
    """MLP predicting injected noise from (noisy window, step embedding, condition)."""

    def __init__(self, dim: int, cond_dim: int, hidden: int = 2048, n_steps: int = 100, seed: int = 0,
                 embed_dim: int = EMBED_DIM):
        rng = np.random.Generator(np.random.PCG64(seed))
        self.dim = dim
        self.cond_dim = cond_dim
        self.hidden = hidden
        self.embed_dim = embed_dim
        self.mlp = MLP(dim + embed_dim + cond_dim, hidden, (dim,), rng)
        dt = T.default_dtype()
        self._emb = timestep_embedding(np.arange(n_steps), embed_dim).astype(dt)
        self.x_mean = np.zeros(dim, dtype=dt)
        self.x_std = np.ones(dim, dtype=dt)
        self.c_mean = np.zeros(cond_dim, dtype=dt)
        self.c_std = np.ones(cond_dim, dtype=dt)

    @property
    def calls(self) -> int:
        return self.mlp.calls

    @calls.setter
    def calls(self, v: int):
        self.mlp.calls = v

    def parameters(self) -> list:
        return self.mlp.parameters()

    def embed(self, i) -> np.ndarray:
        i = np.atleast_1d(np.asarray(i))
        if i.max() < len(self._emb) and i.min() >= 0:
            return self._emb[i]
        return timestep_embedding(i, self.embed_dim).astype(self._emb.dtype)

    def fit_normalization(self, x, cond):
        dt = self.x_mean.dtype
        x = np.asarray(x, dtype=np.float64)
        self.x_mean = x.mean(axis=0).astype(dt)
        self.x_std = np.maximum(x.std(axis=0), STD_FLOOR).astype(dt)
        if self.cond_dim:
            cond = np.asarray(cond, dtype=np.float64).reshape(len(x), -1)
            self.c_mean = cond.mean(axis=0).astype(dt)
            self.c_std = np.maximum(cond.std(axis=0), STD_FLOOR).astype(dt)

    def forward_t(self, xi: T.Tensor, i, cn: T.Tensor) -> T.Tensor:
        n = xi.shape[0]
        emb = self.embed(np.broadcast_to(np.asarray(i), (n,)))
        return self.mlp(T.concat([xi, T.constant(emb), cn], axis=1))[0]

    def eps(self, xi: np.ndarray, i, cn: np.ndarray) -> np.ndarray:
        """Numpy evaluation of the noise prediction (normalized space)."""
        n = xi.shape[0]
        emb = self.embed(np.broadcast_to(np.asarray(i), (n,)))
        return self.mlp.np_forward(np.concatenate([xi, emb, cn], axis=1))[0]


def ddpm_loss(net, x0: np.ndarray, cn: np.ndarray, schedule: NoiseSchedule, rng: np.random.Generator):
    """Mean over the batch of ||eps - eps_hat||^2 at uniformly drawn steps.

    ``net`` may be an :class:`EpsilonNet` (tape result) or any object with
    ``forward_t(xi, i, cond)``.
    """
    x0 = np.asarray(x0)
    n = len(x0)
    if n == 0:
        raise ValueError("empty batch")
    i = rng.integers(0, schedule.n_steps, n)
    eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    xi = diffuse(x0, i, eps, schedule)
    pred = net.forward_t(T.constant(xi), i, T.constant(cn))
    err = T.sub(pred, T.constant(eps))
    return T.mul(T.sum(T.square(err)), 1.0 / n)


def ddim_predict_x0(xi, i, eps_hat, schedule: NoiseSchedule):
    """Predicted clean sample (x_i - sqrt(1 - abar_i) eps_hat) / sqrt(abar_i)."""
    schedule.check_index(i)
    abar = float(schedule.alpha_bars[i])
    if abar <= 0.0:
        raise ZeroDivisionError(f"alpha_bar[{i}] = 0; x0 is not recoverable")
    return ((np.asarray(xi) - math.sqrt(1.0 - abar) * np.asarray(eps_hat)) / math.sqrt(abar)).astype(
        np.asarray(xi).dtype, copy=False)


@dataclass
class SamplerConfig:
    kind: str = "ddim"  # "ddim" | "ddpm"
    steps: int | list = 10
    sigma: str = "zero"  # "zero" | "ancestral"

    def timesteps(self, schedule: NoiseSchedule) -> np.ndarray:
        n = schedule.n_steps
        if self.kind == "ddpm":
            return np.arange(n)
        if isinstance(self.steps, (list, tuple, np.ndarray)):
            ts = np.asarray(self.steps, dtype=int)
        else:
            k = int(self.steps)
            if not 1 <= k <= n:
                raise ValueError(f"step count {k} outside [1, {n}]")
            ts = np.unique(np.round(np.linspace(0, n - 1, k)).astype(int))
        if len(ts) == 0 or np.any(np.diff(ts) <= 0) or ts[0] < 0 or ts[-1] >= n:
            raise ValueError(f"timestep subsequence must be strictly increasing within [0, {n}): {ts}")
        return ts

    def __post_init__(self):
        if self.kind not in ("ddim", "ddpm"):
            raise ValueError(f"unknown sampler {self.kind!r}")
        if self.sigma not in ("zero", "ancestral"):
            raise ValueError(f"unknown sigma rule {self.sigma!r}")


def sample_normalized(net, cn: np.ndarray, sampler: SamplerConfig, schedule: NoiseSchedule,
                      x_init: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    """Run the reverse chain from ``x_init`` (normalized space, shape (n, D))."""
    ts = sampler.timesteps(schedule)
    abar = schedule.alpha_bars
    x = x_init
    if sampler.kind == "ddpm":
        for i in ts[::-1]:
            eps = net.eps(x, i, cn)
            a = schedule.alphas[i]
            coef = (1.0 - a) / math.sqrt(1.0 - abar[i])
            mean = (x - coef * eps) / math.sqrt(a)
            if i > 0:
                var = (1.0 - abar[i - 1]) / (1.0 - abar[i]) * (1.0 - a)
                x = (mean + math.sqrt(var) * rng.standard_normal(x.shape)).astype(x_init.dtype)
            else:
                x = mean.astype(x_init.dtype)
        return x
    for k in range(len(ts) - 1, -1, -1):
        i = ts[k]
        eps = net.eps(x, i, cn)
        x0 = ddim_predict_x0(x, i, eps, schedule)
        if k == 0:
            return x0
        j = ts[k - 1]
        sig = 0.0
        if sampler.sigma == "ancestral":
            sig = math.sqrt((1.0 - abar[j]) / (1.0 - abar[i]) * (1.0 - abar[i] / abar[j]))
        x = math.sqrt(abar[j]) * x0 + math.sqrt(max(1.0 - abar[j] - sig * sig, 0.0)) * eps
        if sig > 0:
            x = x + sig * rng.standard_normal(x.shape)
        x = x.astype(x_init.dtype)
    return x


def sample(cond, sampler: SamplerConfig, net: EpsilonNet, schedule: NoiseSchedule, seed: int | None = None,
           n: int = 1, rng: np.random.Generator | None = None) -> np.ndarray:
    """Raw-space action windows: ``n`` for a single condition, or one per row of ``cond``."""
    rng = rng if rng is not None else np.random.Generator(np.random.PCG64(seed or 0))
    dt = T.default_dtype()
    c = np.asarray(cond, dtype=dt)
    c = np.zeros((1, 0), dtype=dt) if net.cond_dim == 0 else c.reshape(-1, net.cond_dim)
    if len(c) == 1:
        c = np.broadcast_to(c, (n, net.cond_dim))
    n = len(c)
    cn = ((c - net.c_mean) / net.c_std).astype(dt)
    x_init = rng.standard_normal((n, net.dim)).astype(dt)
    xn = sample_normalized(net, cn, sampler, schedule, x_init, rng)
    return xn * net.x_std + net.x_mean


def train_ddpm(net: EpsilonNet, x: np.ndarray, cond: np.ndarray | None, schedule: NoiseSchedule,
               config: TrainConfig, fit_stats: bool = True, callback=None) -> list:
    """Noise-regression training with Adam; returns per-epoch mean loss."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    if len(x) == 0:
        raise ValueError("empty dataset")
    cond = np.zeros((len(x), 0)) if cond is None else np.asarray(cond, dtype=np.float64).reshape(len(x), -1)
    if fit_stats:
        net.fit_normalization(x, cond)
    dt = T.default_dtype()
    xn = ((x - net.x_mean) / net.x_std).astype(dt)
    cn = ((cond - net.c_mean) / net.c_std).astype(dt)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    opt = T.Adam(net.parameters(), lr=config.lr)
    losses = []
    epoch = 0
    for n_epochs, bs in config.stages:
        for _ in range(n_epochs):
            total, count = 0.0, 0
            for b, idx in enumerate(iterate_batches(len(xn), bs, rng, config.max_steps_per_epoch)):
                opt.zero_grad()
                loss = ddpm_loss(net, xn[idx], cn[idx], schedule, rng)
                if not np.isfinite(loss.data):
                    raise T.TrainingDivergedError(f"NaN/inf loss at epoch {epoch}, batch {b}, lr {config.lr}")
                T.backward(loss)
                opt.step()
                total += float(loss.data) * len(idx)
                count += len(idx)
            losses.append(total / count)
            if callback is not None:
                callback(epoch, losses[-1])
            epoch += 1
    return losses
