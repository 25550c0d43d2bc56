"""Strided training windows, likelihood-guided generation and receding-horizon rollouts."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import envs as E
from . import tensor as T
from .diffusion import EpsilonNet, NoiseSchedule, SamplerConfig, sample_normalized
from .flow import LOG_2PI, FlowModel

STALL_WINDOW = 20
STALL_THRESHOLD = 1e-4
MODES = ("plain", "grad_opt", "multi")
MULTI_CHUNK_ROWS = 4096


@dataclass(frozen=True)
class WindowSpec:
    n_obs: int = 4
    n_act: int = 8
    stride: int = 4
    exec_horizon: int = 4

    def __post_init__(self):
        if min(self.n_obs, self.n_act, self.stride, self.exec_horizon) < 1:
            raise ValueError(f"window sizes must be >= 1: {self}")
        if self.exec_horizon > self.n_act * self.stride:
            raise ValueError(f"exec_horizon {self.exec_horizon} exceeds the window span")

    @classmethod
    def unsequenced(cls, n_obs: int = 4, stride: int = 4) -> "WindowSpec":
        """Single-action prediction executed one step at a time."""
        return cls(n_obs=n_obs, n_act=1, stride=stride, exec_horizon=1)

    def act_dim_total(self, act_dim: int) -> int:
        return self.n_act * act_dim

    def obs_dim_total(self, obs_dim: int) -> int:
        return self.n_obs * obs_dim


@dataclass
class PolicyConfig:
    mode: str = "plain"
    sigma: float = 0.5
    opt_steps: int = 10
    opt_lr: float = 0.1
    multi_batch: int = 128

    def __post_init__(self):
        if self.mode == "grad":
            self.mode = "grad_opt"
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.opt_steps < 1 or self.multi_batch < 1:
            raise ValueError("opt_steps and multi_batch must be >= 1")


# --- windows ---------------------------------------------------------------------

def window_indices(t: int, length: int, spec: WindowSpec):
    """Clamped (obs, action) indices for anchor ``t``."""
    obs = np.clip(t - spec.stride * np.arange(spec.n_obs), 0, length - 1)
    act = np.clip(t + spec.stride * np.arange(spec.n_act), 0, length - 1)
    return obs, act


def build_windows(episode: E.Episode, spec: WindowSpec) -> list:
    """One (flat action window, flat obs window) pair per time step."""
    n = len(episode)
    if n < 1:
        raise ValueError("cannot build windows from an empty episode")
    out = []
    for t in range(n):
        oi, ai = window_indices(t, n, spec)
        out.append((episode.actions[ai].ravel(), episode.obs[oi].ravel()))
    return out


def window_arrays(episodes, spec: WindowSpec):
    """Stack windows of several episodes into ``(X, C)`` arrays."""
    xs, cs = [], []
    for ep in episodes:
        for a, o in build_windows(ep, spec):
            xs.append(a)
            cs.append(o)
    return np.array(xs), np.array(cs)


def obs_window(history: list, spec: WindowSpec) -> np.ndarray:
    """Conditioning vector from the observation history (latest last)."""
    t = len(history) - 1
    idx = np.clip(t - spec.stride * np.arange(spec.n_obs), 0, t)
    return np.concatenate([history[i] for i in idx])


def strided_to_steps(window: np.ndarray, stride: int, horizon: int) -> np.ndarray:
    """Per-step actions for the next ``horizon`` steps from a strided window.

    Step ``j`` interpolates linearly between strided entries ``j // stride``
    and ``j // stride + 1``; past the last entry it holds the final action.
    """
    n_act = len(window)
    out = np.empty((horizon,) + window.shape[1:])
    for j in range(horizon):
        k, r = divmod(j, stride)
        if k + 1 < n_act:
            f = r / stride
            out[j] = (1.0 - f) * window[k] + f * window[k + 1]
        else:
            out[j] = window[min(k, n_act - 1)]
    return out


# --- generation --------------------------------------------------------------------

@dataclass
class Generated:
    actions: np.ndarray  # (B, D) raw-space windows
    log_prob: np.ndarray  # (B,) normalized-space log-density of ``actions``
    initial_log_prob: np.ndarray | None = None  # grad_opt: before ascent
    batch_log_prob: np.ndarray | None = None  # multi: (B, multi_batch)


def _base_lp(u: np.ndarray, dim: int) -> np.ndarray:
    return -0.5 * np.sum(u * u, axis=1) - 0.5 * dim * LOG_2PI


def generate_batch(model: FlowModel, cond: np.ndarray, config: PolicyConfig, rngs) -> Generated:
    """Generate one action window per condition row; ``rngs[i]`` drives row ``i``."""
    dt = T.default_dtype()
    cond = np.asarray(cond, dtype=dt).reshape(-1, model.cond_dim)
    b, d = len(cond), model.dim
    if len(rngs) != b:
        raise ValueError(f"need one rng per condition row: {len(rngs)} vs {b}")
    cn = model.normalize_cond(cond).astype(dt)
    res = Generated(None, None)
    if config.mode == "multi":
        m = config.multi_batch
        u = np.stack([config.sigma * r.standard_normal((m, d)) for r in rngs]).astype(dt)
        per = max(1, MULTI_CHUNK_ROWS // m)
        xs, lps = [], []
        for s in range(0, b, per):
            uu = u[s:s + per].reshape(-1, d)
            xn, logdet = model.inverse_n(uu, np.repeat(cn[s:s + per], m, axis=0))
            xs.append(xn.reshape(-1, m, d))
            lps.append((_base_lp(uu, d) + logdet).reshape(-1, m))
        xn, lp = np.concatenate(xs), np.concatenate(lps)
        best = np.argmax(lp, axis=1)
        rows = np.arange(b)
        res.batch_log_prob = lp
        xn, lp = xn[rows, best], lp[rows, best]
    else:
        u = np.stack([config.sigma * r.standard_normal(d) for r in rngs]).astype(dt)
        xn, logdet = model.inverse_n(u, cn)
        lp = _base_lp(u, d) + logdet
        if config.mode == "grad_opt":
            state = T.AdamState.like([xn], lr=config.opt_lr)
            for k in range(config.opt_steps):
                lp_k, g = model.grad_log_prob_n(xn, cn)
                if k == 0:
                    res.initial_log_prob = lp_k
                xn = T.adam_step([xn], [g], state, maximize=True)[0]
            lp = model.log_prob_n(xn, cn)
    x = model.denormalize_x(xn)
    if not np.isfinite(x).all():
        raise T.NonFiniteError(f"non-finite action generated in {config.mode} mode")
    res.actions, res.log_prob = x, lp
    return res


def generate(obs_window_vec, model: FlowModel, config: PolicyConfig, rng: np.random.Generator | None = None):
    """Single-condition generation; returns ``(action_window, log_prob)``."""
    rng = rng if rng is not None else np.random.Generator(np.random.PCG64(0))
    g = generate_batch(model, np.asarray(obs_window_vec)[None, :], config, [rng])
    return g.actions[0], float(g.log_prob[0])


# --- policies ------------------------------------------------------------------------

class Policy:
    """Maps a batch of conditioning windows to per-step actions for the next horizon."""

    spec: WindowSpec
    act_dim: int

    def sample_windows(self, cond: np.ndarray, rngs) -> np.ndarray:
        raise NotImplementedError

    def plan(self, cond: np.ndarray, states, rngs) -> np.ndarray:
        windows = self.sample_windows(cond, rngs).reshape(len(cond), self.spec.n_act, self.act_dim)
        return np.stack([strided_to_steps(w, self.spec.stride, self.spec.exec_horizon) for w in windows])


class FlowPolicy(Policy):
    def __init__(self, model: FlowModel, spec: WindowSpec, act_dim: int, config: PolicyConfig | None = None):
        if model.dim != spec.n_act * act_dim:
            raise T.ShapeError("flow policy action window", (model.dim,), (spec.n_act * act_dim,))
        self.model, self.spec, self.act_dim = model, spec, act_dim
        self.config = config or PolicyConfig()

    def sample_windows(self, cond, rngs):
        return generate_batch(self.model, cond, self.config, rngs).actions


class DiffusionPolicy(Policy):
    def __init__(self, net: EpsilonNet, schedule: NoiseSchedule, spec: WindowSpec, act_dim: int,
                 sampler: SamplerConfig | None = None):
        if net.dim != spec.n_act * act_dim:
            raise T.ShapeError("diffusion policy action window", (net.dim,), (spec.n_act * act_dim,))
        self.net, self.schedule, self.spec, self.act_dim = net, schedule, spec, act_dim
        self.sampler = sampler or SamplerConfig(kind="ddim", steps=10)

    def sample_windows(self, cond, rngs):
        dt = T.default_dtype()
        cond = np.asarray(cond, dtype=dt).reshape(-1, self.net.cond_dim)
        cn = ((cond - self.net.c_mean) / self.net.c_std).astype(dt)
        x_init = np.stack([r.standard_normal(self.net.dim) for r in rngs]).astype(dt)
        # stochastic samplers share one noise stream seeded from the first trial
        noise_rng = np.random.Generator(np.random.PCG64(int(rngs[0].integers(2**62))))
        xn = sample_normalized(self.net, cn, self.sampler, self.schedule, x_init, noise_rng)
        x = xn * self.net.x_std + self.net.x_mean
        if not np.isfinite(x).all():
            raise T.NonFiniteError("non-finite action generated by diffusion sampler")
        return x


class OraclePolicy(Policy):
    """Replays the scripted demonstrator; the branch is drawn once per trial."""

    def __init__(self, task: str, spec: WindowSpec):
        self.task, self.spec = task, spec
        self.act_dim = E.task_spec(task).act_dim
        self._modes = {}

    def plan(self, cond, states, rngs):
        out = np.zeros((len(states), self.spec.exec_horizon, self.act_dim))
        for b, (state, rng) in enumerate(zip(states, rngs)):
            key = id(rng)
            if key not in self._modes or state.t == 0:
                self._modes[key] = int(rng.integers(0, 2))
            s = state
            for j in range(self.spec.exec_horizon):
                if E.is_done(s):
                    break
                out[b, j] = E.demo_policy(s, self._modes[key])
                s = E.step(s, out[b, j])
        return out


# --- rollouts ------------------------------------------------------------------------

@dataclass
class Trajectory:
    task: str
    seed: int
    actions: np.ndarray
    success: bool = False
    replans: int = 0
    stall: bool = False
    goal: int = -1  # two-goal: branch reached
    plan_ms: list = field(default_factory=list)  # per-replan generation time, batch-amortized
    final_state: E.EnvState | None = field(default=None, repr=False)

    @property
    def steps(self) -> int:
        return len(self.actions)


def detect_stall(actions: np.ndarray, success: bool, window: int = STALL_WINDOW,
                 threshold: float = STALL_THRESHOLD) -> bool:
    if success or len(actions) < window + 1:
        return False
    d = np.abs(np.diff(np.asarray(actions), axis=0)).mean(axis=1)
    run = np.convolve(d, np.ones(window) / window, mode="valid")
    return bool((run < threshold).any())


def trial_seeds(seed: int, trial: int):
    """(env seed, policy seed) for trial ``trial`` of a run seeded with ``seed``."""
    env_seed, pol_seed = np.random.SeedSequence([seed, trial]).generate_state(2, np.uint64)
    return int(env_seed), int(pol_seed)


def run_trials(task: str, policy: Policy, seed_pairs, max_steps: int | None = None) -> list:
    """Roll out several trials in lockstep so each replan is one batched call."""
    spec = policy.spec
    max_steps = max_steps or E.task_spec(task).max_steps
    states = [E.reset(task, es) for es, _ in seed_pairs]
    rngs = [np.random.Generator(np.random.PCG64(ps)) for _, ps in seed_pairs]
    hist = [[s.features()] for s in states]
    acts = [[] for _ in states]
    replans = [0] * len(states)
    spent = [[] for _ in states]

    def active(i):
        return not E.is_success(states[i]) and states[i].t < max_steps

    live = [i for i in range(len(states)) if active(i)]
    while live:
        cond = np.stack([obs_window(hist[i], spec) for i in live])
        t0 = time.perf_counter()
        plans = policy.plan(cond, [states[i] for i in live], [rngs[i] for i in live])
        ms = 1e3 * (time.perf_counter() - t0) / len(live)
        for k, i in enumerate(live):
            replans[i] += 1
            spent[i].append(ms)
            for j in range(spec.exec_horizon):
                if not active(i):
                    break
                states[i] = E.step(states[i], plans[k, j])
                acts[i].append(states[i].last_action)
                hist[i].append(states[i].features())
        live = [i for i in live if active(i)]
    out = []
    for i, (es, _) in enumerate(seed_pairs):
        ok = E.is_success(states[i])
        a = np.array(acts[i]).reshape(-1, policy.act_dim)
        goal = E.reached_goal(states[i]) if task == "two-goal" else -1
        out.append(Trajectory(task, es, a, ok, replans[i], detect_stall(a, ok), goal, spent[i], states[i]))
    return out


def rollout(task: str, policy: Policy, seed: int, max_steps: int | None = None) -> tuple:
    """One episode from ``reset(task, seed)``; returns ``(success, trajectory)``."""
    pol_seed = int(np.random.SeedSequence([seed]).generate_state(1, np.uint64)[0])
    traj = run_trials(task, policy, [(seed, pol_seed)], max_steps)[0]
    return traj.success, traj


def evaluate(task: str, policy: Policy, trials: int, seed: int, max_steps: int | None = None,
             batch: int | None = None) -> list:
    """``trials`` seeded rollouts; trial ``i`` uses seeds derived from ``(seed, i)``."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    pairs = [trial_seeds(seed, i) for i in range(trials)]
    batch = batch or trials
    out = []
    for s in range(0, trials, batch):
        out += run_trials(task, policy, pairs[s:s + batch], max_steps)
    return out


def success_rate(trajs) -> float:
    return float(np.mean([t.success for t in trajs]))


def expected_replans(steps: int, exec_horizon: int) -> int:
    return math.ceil(steps / exec_horizon)
