"""Training, evaluation, ablation and benchmark drivers shared by the CLI and tests."""
from __future__ import annotations

import csv
import itertools
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import envs as E
from . import tensor as T
from .diffusion import EpsilonNet, NoiseSchedule, SamplerConfig, sample_normalized, train_ddpm
from .flow import FlowConfig, FlowModel, TrainConfig, train_flow
from .policy import (DiffusionPolicy, FlowPolicy, OraclePolicy, PolicyConfig, WindowSpec, evaluate,
                     generate_batch, window_arrays)
from .storage import Checkpoint

RESULT_FIELDS = ("task", "model", "episodes", "mode", "s", "sigma", "success_rate", "n_trials",
                 "mean_latency_ms", "p99_latency_ms", "seed")


def fmt(v) -> str:
    """CSV cell: floats with 6 significant digits, everything else verbatim."""
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def write_rows(path, fields, rows, append: bool = False):
    exists = append and os.path.exists(path) and os.path.getsize(path) > 0
    with open(path, "a" if append else "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if not exists:
            w.writerow(fields)
        for r in rows:
            w.writerow([fmt(r[k]) for k in fields])


# --- training ------------------------------------------------------------------------

def parse_stages(text: str) -> list:
    """``"100x128,100x256"`` -> ``[(100, 128), (100, 256)]``."""
    out = []
    for tok in text.split(","):
        try:
            e, b = tok.lower().split("x")
            out.append((int(e), int(b)))
        except ValueError:
            raise ValueError(f"bad stage {tok!r}; expected EPOCHSxBATCH") from None
        if out[-1][0] < 0 or out[-1][1] < 1:
            raise ValueError(f"bad stage {tok!r}")
    return out


@dataclass
class TrainSettings:
    """Model and optimizer settings; defaults are the full-scale recipe."""

    hidden: int = 2048
    layers: int = 10
    bins: int = 8
    bound: float = 3.0
    transform: str = "rq"
    lr: float = 1e-4
    stages: list = field(default_factory=lambda: [(100, 128), (100, 256), (100, 512)])
    jitter: float = 0.0
    diffusion_steps: int = 100

    @classmethod
    def desk(cls, **kw) -> "TrainSettings":
        """Small widths and a short schedule that train in about a minute on one core."""
        base = dict(hidden=128, lr=1e-3, stages=[(40, 64), (40, 128)], jitter=0.05)
        base.update(kw)
        return cls(**base)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(stages=[tuple(s) for s in self.stages], lr=self.lr, seed=seed, jitter=self.jitter)

    def as_dict(self) -> dict:
        return {"hidden": self.hidden, "layers": self.layers, "bins": self.bins, "bound": self.bound,
                "transform": self.transform, "lr": self.lr, "stages": [list(s) for s in self.stages],
                "jitter": self.jitter, "diffusion_steps": self.diffusion_steps}


def train_checkpoint(kind: str, task: str, episodes, window: WindowSpec, settings: TrainSettings,
                     seed: int, loss_log: list | None = None) -> Checkpoint:
    """Fit a flow or diffusion policy on demonstration episodes (or wrap the oracle)."""
    spec = E.task_spec(task)
    meta = {"episodes": len(episodes) if episodes is not None else 0, **settings.as_dict()}
    ckpt = Checkpoint(kind, task, window, spec.obs_dim, spec.act_dim, train=meta, seed=seed)
    if kind == "oracle":
        return ckpt
    x, c = window_arrays(episodes, window)
    if kind == "nf":
        model = FlowModel(FlowConfig(x.shape[1], c.shape[1], settings.layers, settings.hidden, settings.bins,
                                     settings.bound, settings.transform, seed))
        losses = train_flow(model, x, c, settings.train_config(seed))
    elif kind == "ddpm":
        model = EpsilonNet(x.shape[1], c.shape[1], hidden=settings.hidden, n_steps=settings.diffusion_steps,
                           seed=seed)
        ckpt.schedule = NoiseSchedule.cosine(settings.diffusion_steps)
        cfg = settings.train_config(seed)
        cfg.jitter = 0.0
        losses = train_ddpm(model, x, c, ckpt.schedule, cfg)
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    if loss_log is not None:
        loss_log.extend(losses)
    ckpt.model = model
    return ckpt


def build_policy(ckpt: Checkpoint, config: PolicyConfig | None = None, sampler: SamplerConfig | None = None):
    if ckpt.kind == "oracle":
        return OraclePolicy(ckpt.task, ckpt.window)
    if ckpt.kind == "nf":
        return FlowPolicy(ckpt.model, ckpt.window, ckpt.act_dim, config)
    return DiffusionPolicy(ckpt.model, ckpt.schedule, ckpt.window, ckpt.act_dim, sampler)


def check_compatible(ckpt: Checkpoint, task: str):
    spec = E.task_spec(task)
    if (ckpt.obs_dim, ckpt.act_dim) != (spec.obs_dim, spec.act_dim):
        raise T.ShapeError(f"checkpoint for {ckpt.task} vs task {task}",
                           (ckpt.obs_dim, ckpt.act_dim), (spec.obs_dim, spec.act_dim))


# --- evaluation ----------------------------------------------------------------------

def worker_count(single_thread: bool = False) -> int:
    if single_thread:
        return 1
    try:
        return max(1, int(os.environ.get("NFP_THREADS", "1")))
    except ValueError:
        return 1


def run_evaluation(task: str, policy, trials: int, seed: int, workers: int = 1, max_steps: int | None = None):
    """Seeded trials, optionally split over threads; results come back in trial order."""
    if workers <= 1 or trials < 2:
        return evaluate(task, policy, trials, seed, max_steps)
    from .policy import run_trials, trial_seeds
    pairs = [trial_seeds(seed, i) for i in range(trials)]
    chunk = math.ceil(trials / workers)
    parts = [pairs[i:i + chunk] for i in range(0, trials, chunk)]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        results = list(ex.map(lambda p: run_trials(task, policy, p, max_steps), parts))
    return [t for part in results for t in part]


def result_row(task, model, episodes, mode, stride, sigma, trajs, seed, timing: bool = True) -> dict:
    lat = np.array([ms for t in trajs for ms in t.plan_ms]) if timing else np.array([])
    return {"task": task, "model": model, "episodes": episodes, "mode": mode, "s": stride, "sigma": float(sigma),
            "success_rate": float(np.mean([t.success for t in trajs])), "n_trials": len(trajs),
            "mean_latency_ms": float(lat.mean()) if lat.size else float("nan"),
            "p99_latency_ms": float(np.percentile(lat, 99)) if lat.size else float("nan"), "seed": seed}


# --- ablation grid ---------------------------------------------------------------------

GRID_AXES = {
    "s": int,
    "sigma": float,
    "mode": lambda v: PolicyConfig(mode=v).mode,
    "seq": lambda v: {"on": "on", "off": "off"}[v],
}
GRID_DEFAULTS = {"s": [4], "sigma": [0.5], "mode": ["plain"], "seq": ["on"]}


class GridError(ValueError):
    pass


def parse_grid(text: str) -> dict:
    """``"s=1,2;sigma=0.5"`` -> axis -> values; unspecified axes take defaults."""
    grid = {k: list(v) for k, v in GRID_DEFAULTS.items()}
    seen = set()
    for tok in filter(None, (t.strip() for t in text.split(";"))):
        if "=" not in tok:
            raise GridError(f"grid token {tok!r} is not key=values")
        key, vals = (p.strip() for p in tok.split("=", 1))
        if key not in GRID_AXES:
            raise GridError(f"unknown grid axis {key!r}; expected one of {sorted(GRID_AXES)}")
        if key in seen:
            raise GridError(f"grid axis {key!r} given twice")
        seen.add(key)
        try:
            parsed = [GRID_AXES[key](v.strip()) for v in vals.split(",") if v.strip()]
        except (ValueError, KeyError):
            raise GridError(f"bad value in grid token {tok!r}") from None
        if not parsed:
            raise GridError(f"grid axis {key!r} has no values")
        if key == "s" and min(parsed) < 1:
            raise GridError("stride must be >= 1")
        if key == "sigma" and min(parsed) < 0:
            raise GridError("sigma must be >= 0")
        grid[key] = parsed
    return grid


def grid_cells(grid: dict) -> list:
    keys = ("seq", "s", "mode", "sigma")
    return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]


def run_ablation(task: str, n_episodes: int, grid: dict, trials: int, seed: int, settings: TrainSettings,
                 timing: bool = True, workers: int = 1, log=None) -> list:
    """One model per (seq, s); every (mode, sigma) evaluated on it."""
    episodes = E.generate_dataset(task, n_episodes, seed)
    rows = []
    models = {}
    for cell in grid_cells(grid):
        key = (cell["seq"], cell["s"])
        if key not in models:
            window = WindowSpec(stride=cell["s"]) if cell["seq"] == "on" else WindowSpec.unsequenced(stride=cell["s"])
            models[key] = train_checkpoint("nf", task, episodes, window, settings, seed)
        ckpt = models[key]
        pol = build_policy(ckpt, PolicyConfig(mode=cell["mode"], sigma=cell["sigma"]))
        trajs = run_evaluation(task, pol, trials, seed, workers)
        label = "nf" if cell["seq"] == "on" else "nf-noseq"
        rows.append(result_row(task, label, n_episodes, cell["mode"], cell["s"], cell["sigma"], trajs, seed, timing))
        if log:
            log(rows[-1])
    return rows


# --- latency ---------------------------------------------------------------------------

BENCH_FIELDS = ("method", "n", "mean_ms", "p50_ms", "p99_ms", "net_evals", "rows_per_eval", "seed")


def _conditions(ckpt: Checkpoint, n: int, rng: np.random.Generator) -> np.ndarray:
    m = ckpt.model
    return (m.c_mean + m.c_std * rng.standard_normal((n, len(m.c_mean)))).astype(np.float32)


def bench_latency(nf: Checkpoint, ddpm: Checkpoint | None, n: int, ddpm_steps: int, seed: int,
                  multi_batch: int = 128, opt_steps: int = 10, methods=("plain", "multi", "grad")) -> list:
    """Per-generation wall clock for single observations (batch of one)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    rows = []
    cond = _conditions(nf, n, rng)
    model = nf.model
    all_methods = [("nf-plain", PolicyConfig(mode="plain")),
                   ("nf-multi", PolicyConfig(mode="multi", multi_batch=multi_batch)),
                   ("nf-grad", PolicyConfig(mode="grad_opt", opt_steps=opt_steps))]
    for name, cfg in all_methods:
        if name[3:] not in methods:
            continue
        gen_rng = np.random.Generator(np.random.PCG64(seed))
        times = []
        model.reset_eval_counter()
        for i in range(n):
            t0 = time.perf_counter()
            generate_batch(model, cond[i:i + 1], cfg, [gen_rng])
            times.append(time.perf_counter() - t0)
        evals = model.network_evals() / n
        rows.append(_bench_row(name, times, evals, multi_batch if cfg.mode == "multi" else 1, seed))
    if ddpm is not None:
        net = ddpm.model
        if net.cond_dim != model.cond_dim or net.dim != model.dim:
            raise T.ShapeError("bench-latency checkpoints", (model.dim, model.cond_dim), (net.dim, net.cond_dim))
        sampler = SamplerConfig(kind="ddpm") if ddpm_steps >= ddpm.schedule.n_steps else \
            SamplerConfig(kind="ddim", steps=ddpm_steps)
        gen_rng = np.random.Generator(np.random.PCG64(seed))
        times = []
        net.calls = 0
        cn_all = ((cond - net.c_mean) / net.c_std).astype(np.float32)
        for i in range(n):
            t0 = time.perf_counter()
            x0 = gen_rng.standard_normal((1, net.dim)).astype(np.float32)
            xn = sample_normalized(net, cn_all[i:i + 1], sampler, ddpm.schedule, x0, gen_rng)
            _ = xn * net.x_std + net.x_mean
            times.append(time.perf_counter() - t0)
        rows.append(_bench_row(f"ddpm-{ddpm_steps}", times, net.calls / n, 1, seed))
    return rows


def _bench_row(name, times, evals, rows_per_eval, seed) -> dict:
    ms = 1e3 * np.asarray(times)
    return {"method": name, "n": len(ms), "mean_ms": float(ms.mean()), "p50_ms": float(np.percentile(ms, 50)),
            "p99_ms": float(np.percentile(ms, 99)), "net_evals": float(evals), "rows_per_eval": rows_per_eval,
            "seed": seed}


# --- density check ---------------------------------------------------------------------

@dataclass
class DensityReport:
    integral: float
    roundtrip: float
    n_points: int

    @property
    def ok(self) -> bool:
        return 0.99 <= self.integral <= 1.01 and self.roundtrip < 1e-4


def density_check(model: FlowModel, extent: float = 6.0, step: float = 0.05, chunk: int = 8192,
                  cond=None, roundtrip: bool = True) -> DensityReport:
    """Midpoint-rule integral of the normalized-space density over [-extent, extent]^2.

    ``cond`` is a normalized condition vector (zeros by default).  With
    ``roundtrip=False`` the inverse pass is skipped and the error reads 0.
    """
    if model.dim != 2:
        raise T.ShapeError("density-check needs a 2-D model", (model.dim,), (2,))
    n = int(round(2 * extent / step))
    centers = -extent + step * (np.arange(n) + 0.5)
    gx, gy = np.meshgrid(centers, centers, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1).astype(T.default_dtype())
    cn = np.zeros((1, model.cond_dim), dtype=pts.dtype) if cond is None else \
        np.asarray(cond, dtype=pts.dtype).reshape(1, model.cond_dim)
    total, err = 0.0, 0.0
    for s in range(0, len(pts), chunk):
        xb = pts[s:s + chunk]
        c = np.broadcast_to(cn, (len(xb), model.cond_dim))
        with T.no_grad():
            u, logdet = model.forward_t(T.constant(xb), T.constant(c))
        lp = -0.5 * np.sum(u.data.astype(np.float64) ** 2, axis=1) - np.log(2 * np.pi) + logdet.data
        total += float(np.exp(lp).sum()) * step * step
        if not roundtrip:
            continue
        back, _ = model.inverse_n(u.data, np.ascontiguousarray(c))
        err = max(err, float(np.abs(back - xb).max()))
    return DensityReport(total, err, len(pts))
