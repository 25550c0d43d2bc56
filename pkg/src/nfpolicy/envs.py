"""Kinematic 2-D manipulation tasks with scripted demonstrators.

All tasks live in the box [-1, 1]^2 and move each arm by at most ``MAX_STEP``
per step.  Randomness comes only from ``numpy.random.PCG64`` seeded
explicitly, so (task, seed) pins every state and dataset bit-for-bit.

Tasks
-----
reach       one arm, one goal.
two-goal    one arm, two goals; the demonstrator heads for a waypoint below
            the left or the right goal (``mode_choice``), then for the goal.
push-block  one arm pushes a block to a goal (contact carries the block along
            with the pusher's motion); when the block is in the way
            the demonstrator detours around the side picked by ``mode_choice``.
dual-lift   two arms with grippers must hold both pot handles together
            before the pot rises.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

WORKSPACE = 1.0
MAX_STEP = 0.1
GOAL_RADIUS = 0.05

TWO_GOAL_WAYPOINT_Y = -0.1
DEMO_SMOOTHING = {"two-goal": 0.5}
DEMO_PAUSE = {"push-block": (8, 16)}  # idle steps at first contact, inclusive range
PUSH_RADIUS = 0.1  # agent-to-block-center distance at contact
PUSH_STANDOFF = 0.1  # pre-push pose clearance behind the block
PUSH_CONE = 0.35  # tan of the half-angle of the push cone behind the block
HANDLE_OFFSET = 0.15
GRIP_RADIUS = 0.05
LIFT_RATE = 0.05
LIFT_TARGET = 0.2

TASKS = ("reach", "two-goal", "push-block", "dual-lift")


@dataclass(frozen=True)
class TaskSpec:
    name: str
    n_arms: int
    has_gripper: bool
    max_steps: int
    ranges: dict = field(default_factory=dict)  # element -> ((xlo, xhi), (ylo, yhi))

    @property
    def act_dim(self) -> int:
        return self.n_arms * (3 if self.has_gripper else 2)

    @property
    def obs_dim(self) -> int:
        return _FEATURE_DIMS[self.name] + self.act_dim


_FEATURE_DIMS = {"reach": 4, "two-goal": 6, "push-block": 6, "dual-lift": 11}

_SPECS = {
    "reach": TaskSpec("reach", 1, False, 60, {
        "agent": ((-0.9, 0.9), (-0.9, 0.9)),
        "goal": ((-0.8, 0.8), (-0.8, 0.8)),
    }),
    "two-goal": TaskSpec("two-goal", 1, False, 60, {
        "agent": ((-0.1, 0.1), (-0.9, -0.7)),
        "goal_left": ((-0.85, -0.65), (0.5, 0.8)),
        "goal_right": ((0.65, 0.85), (0.5, 0.8)),
    }),
    "push-block": TaskSpec("push-block", 1, False, 80, {
        "agent": ((-0.8, 0.8), (-0.9, 0.3)),
        "block": ((-0.3, 0.3), (-0.3, 0.0)),
        "goal": ((-0.4, 0.4), (0.45, 0.7)),
    }),
    "dual-lift": TaskSpec("dual-lift", 2, True, 60, {
        "left_arm": ((-0.8, -0.5), (-0.9, -0.6)),
        "right_arm": ((0.5, 0.8), (-0.9, -0.6)),
        "pot": ((-0.3, 0.3), (0.0, 0.4)),
    }),
}


def task_spec(name: str) -> TaskSpec:
    try:
        return _SPECS[name]
    except KeyError:
        raise ValueError(f"unknown task {name!r}; expected one of {TASKS}") from None


@dataclass(frozen=True)
class EnvState:
    task: str
    agents: np.ndarray  # (n_arms, 2)
    objects: np.ndarray  # (n_obj, 2): goals / block / pot depending on task
    grips: np.ndarray  # (n_arms,) bool
    height: float
    t: int
    last_action: np.ndarray

    @property
    def spec(self) -> TaskSpec:
        return task_spec(self.task)

    def features(self) -> np.ndarray:
        """Observation vector: task features followed by the last executed action.

        Targets are given relative to the arm that acts on them, which is what
        the demonstrators key on.
        """
        agent = self.agents[0]
        if self.task == "dual-lift":
            f = np.concatenate([self.agents.ravel(), self.grips.astype(np.float64),
                                (self.handles() - self.agents).ravel(), [self.height]])
        elif self.task == "push-block":
            block, goal = self.objects
            f = np.concatenate([agent, block - agent, goal - block])
        else:
            f = np.concatenate([agent, (self.objects - agent).ravel()])
        return np.concatenate([f, self.last_action])

    def handles(self) -> np.ndarray:
        pot = self.objects[0]
        return np.array([pot - [HANDLE_OFFSET, 0.0], pot + [HANDLE_OFFSET, 0.0]])

    def same_as(self, other: "EnvState") -> bool:
        return (self.task == other.task and self.t == other.t and self.height == other.height
                and np.array_equal(self.agents, other.agents) and np.array_equal(self.objects, other.objects)
                and np.array_equal(self.grips, other.grips) and np.array_equal(self.last_action, other.last_action))


def _uniform(rng: np.random.Generator, box) -> np.ndarray:
    (xlo, xhi), (ylo, yhi) = box
    return np.array([rng.uniform(xlo, xhi), rng.uniform(ylo, yhi)])


def reset(task: str, seed: int) -> EnvState:
    spec = task_spec(task)
    rng = np.random.Generator(np.random.PCG64(seed))
    r = spec.ranges
    if task == "reach":
        agents = _uniform(rng, r["agent"])[None]
        objects = _uniform(rng, r["goal"])[None]
    elif task == "two-goal":
        agents = _uniform(rng, r["agent"])[None]
        objects = np.stack([_uniform(rng, r["goal_left"]), _uniform(rng, r["goal_right"])])
    elif task == "push-block":
        agents = _uniform(rng, r["agent"])[None]
        block = _uniform(rng, r["block"])
        # keep the agent clear of the block at reset
        while np.linalg.norm(agents[0] - block) < PUSH_RADIUS + 0.05:
            agents = _uniform(rng, r["agent"])[None]
        objects = np.stack([block, _uniform(rng, r["goal"])])
    else:
        agents = np.stack([_uniform(rng, r["left_arm"]), _uniform(rng, r["right_arm"])])
        objects = _uniform(rng, r["pot"])[None]
    return EnvState(task, agents, objects, np.zeros(spec.n_arms, dtype=bool), 0.0, 0, np.zeros(spec.act_dim))


def _clip_norm(v: np.ndarray, limit: float) -> np.ndarray:
    n = float(np.linalg.norm(v))
    return v if n <= limit else v * (limit / n)


def step(state: EnvState, action) -> EnvState:
    spec = state.spec
    a = np.asarray(action, dtype=np.float64).reshape(-1)
    if a.shape != (spec.act_dim,):
        raise ValueError(f"{state.task}: action dim {a.shape[0]} != {spec.act_dim}")
    if not np.isfinite(a).all():
        raise ValueError(f"{state.task}: non-finite action {a}")
    per = 3 if spec.has_gripper else 2
    applied = a.copy()
    agents = state.agents.copy()
    grips = state.grips.copy()
    for k in range(spec.n_arms):
        d = _clip_norm(a[k * per:k * per + 2], MAX_STEP)
        agents[k] = np.clip(agents[k] + d, -WORKSPACE, WORKSPACE)
        applied[k * per:k * per + 2] = d
        if spec.has_gripper:
            g = float(np.clip(a[k * per + 2], -1.0, 1.0))
            applied[k * per + 2] = g
            if g > 0.5:
                grips[k] = True
            elif g < -0.5:
                grips[k] = False
    objects = state.objects.copy()
    height = state.height
    if state.task == "push-block":
        # paddle contact: a pusher moving into the block carries it along
        block = objects[0]
        d = agents[0] - state.agents[0]
        rel_old = block - state.agents[0]
        if np.linalg.norm(block - agents[0]) < PUSH_RADIUS and d @ rel_old > 0:
            block = block + d
        rel = block - agents[0]
        dist = float(np.linalg.norm(rel))
        if dist < PUSH_RADIUS:
            normal = rel / dist if dist > 1e-9 else np.array([0.0, 1.0])
            block = agents[0] + PUSH_RADIUS * normal
        objects[0] = np.clip(block, -WORKSPACE, WORKSPACE)
    elif state.task == "dual-lift":
        handles = state.handles()
        held = all(grips[k] and np.linalg.norm(agents[k] - handles[k]) <= GRIP_RADIUS for k in range(2))
        if held:
            height = height + LIFT_RATE
    return EnvState(state.task, agents, objects, grips, height, state.t + 1, applied)


def is_success(state: EnvState) -> bool:
    if state.task == "reach":
        return bool(np.linalg.norm(state.agents[0] - state.objects[0]) < GOAL_RADIUS)
    if state.task == "two-goal":
        return bool(min(np.linalg.norm(state.agents[0] - g) for g in state.objects) < GOAL_RADIUS)
    if state.task == "push-block":
        return bool(np.linalg.norm(state.objects[0] - state.objects[1]) < GOAL_RADIUS)
    return bool(state.height >= LIFT_TARGET - 1e-9)


def reached_goal(state: EnvState) -> int:
    """For two-goal: 0 if at the left goal, 1 if at the right goal, -1 otherwise."""
    for k, g in enumerate(state.objects):
        if np.linalg.norm(state.agents[0] - g) < GOAL_RADIUS:
            return k
    return -1


def is_done(state: EnvState) -> bool:
    return is_success(state) or state.t >= state.spec.max_steps


# --- demonstrators ---------------------------------------------------------------

def _toward(pos: np.ndarray, target: np.ndarray) -> np.ndarray:
    return _clip_norm(target - pos, MAX_STEP)


def _perp(v: np.ndarray) -> np.ndarray:
    return np.array([-v[1], v[0]])


def _segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    return float(np.linalg.norm(a + t * ab - p))


def _push_action(agent, block, goal, side: int) -> np.ndarray:
    to_goal = goal - block
    remaining = float(np.linalg.norm(to_goal))
    direction = to_goal / remaining if remaining > 1e-9 else np.array([0.0, 1.0])
    behind = -direction
    rel = agent - block
    along = float(rel @ behind)
    lateral = float(rel @ _perp(direction))
    dist = float(np.linalg.norm(rel))
    if along > 0 and abs(lateral) < PUSH_CONE * along and dist < PUSH_RADIUS + PUSH_STANDOFF + 0.05:
        if dist <= PUSH_RADIUS + 1e-3:
            # in contact from behind: carry the block straight at the goal
            return _clip_norm(to_goal, MAX_STEP)
        return _toward(agent, block + PUSH_RADIUS * behind)
    pre = block + (PUSH_RADIUS + PUSH_STANDOFF) * behind
    if _segment_distance(block, agent, pre) < PUSH_RADIUS + 0.02:
        # the straight line to the pre-push pose runs into the block: orbit towards it
        u = rel / max(dist, 1e-9)
        ang = math.atan2(behind[0] * u[1] - behind[1] * u[0], behind @ u)
        turn = side if abs(ang) > 0.8 * math.pi else (1.0 if ang > 0 else -1.0)
        new_ang = turn * abs(ang) - turn * min(abs(ang), 0.7)
        c, s_ = math.cos(new_ang), math.sin(new_ang)
        waypoint = block + (PUSH_RADIUS + 0.1) * np.array([c * behind[0] - s_ * behind[1],
                                                             s_ * behind[0] + c * behind[1]])
        return _toward(agent, waypoint)
    return _toward(agent, pre)


def _smooth(state: EnvState, desired: np.ndarray) -> np.ndarray:
    """Blend the desired step with the previous one, as a hand-guided arm would."""
    beta = DEMO_SMOOTHING.get(state.task, 0.0)
    return _clip_norm(beta * state.last_action + (1.0 - beta) * desired, MAX_STEP)


def demo_policy(state: EnvState, mode_choice: str | int = "left") -> np.ndarray:
    """Scripted expert action for the current state.

    ``mode_choice`` ("left"/"right" or 0/1) picks the branch for two-goal and
    the detour side for push-block; other tasks ignore it.
    """
    side = 0 if mode_choice in ("left", 0) else 1
    agent = state.agents[0]
    if state.task == "reach":
        return _toward(agent, state.objects[0])
    if state.task == "two-goal":
        goal = state.objects[side]
        if agent[1] < TWO_GOAL_WAYPOINT_Y - GOAL_RADIUS:
            return _smooth(state, _toward(agent, np.array([goal[0], TWO_GOAL_WAYPOINT_Y])))
        return _smooth(state, _toward(agent, goal))
    if state.task == "push-block":
        return _smooth(state, _push_action(agent, state.objects[0], state.objects[1], 1 if side == 0 else -1))
    out = []
    for k, handle in enumerate(state.handles()):
        pos = state.agents[k]
        if np.linalg.norm(pos - handle) <= 0.02:
            out += [0.0, 0.0, 1.0]
        else:
            d = _toward(pos, handle)
            out += [d[0], d[1], -1.0]
    return np.array(out)


def optimal_steps(state: EnvState, mode_choice: str | int | None = None) -> int:
    """Step count of the straight-line solution.

    For two-goal, ``mode_choice`` measures to that goal instead of the nearer one.
    """
    agent = state.agents[0]
    if state.task == "reach":
        return max(1, math.ceil((np.linalg.norm(agent - state.objects[0]) - GOAL_RADIUS) / MAX_STEP))
    if state.task == "two-goal":
        goals = state.objects if mode_choice is None else [state.objects[0 if mode_choice in ("left", 0) else 1]]
        d = min(np.linalg.norm(agent - g) for g in goals)
        return max(1, math.ceil((d - GOAL_RADIUS) / MAX_STEP))
    if state.task == "push-block":
        block, goal = state.objects
        direction = (goal - block) / np.linalg.norm(goal - block)
        pre = block - PUSH_RADIUS * direction
        return (math.ceil(np.linalg.norm(agent - pre) / MAX_STEP)
                + max(1, math.ceil((np.linalg.norm(goal - block) - GOAL_RADIUS) / MAX_STEP)))
    reach = max(math.ceil(np.linalg.norm(state.agents[k] - h) / MAX_STEP) for k, h in enumerate(state.handles()))
    return reach + 1 + math.ceil(LIFT_TARGET / LIFT_RATE - 1e-9)


# --- datasets ----------------------------------------------------------------------

@dataclass
class Episode:
    obs: np.ndarray  # (T, obs_dim), obs[t] seen before actions[t]
    actions: np.ndarray  # (T, act_dim)
    task: str
    seed: int
    mode: int = 0

    def __post_init__(self):
        if len(self.obs) != len(self.actions):
            raise ValueError(f"obs/actions length mismatch: {len(self.obs)} vs {len(self.actions)}")

    def __len__(self) -> int:
        return len(self.actions)


def in_contact(state: EnvState) -> bool:
    """Push-block: the pusher touches the block."""
    return state.task == "push-block" and np.linalg.norm(state.agents[0] - state.objects[0]) <= PUSH_RADIUS + 1e-3


def run_demo(task: str, seed: int, mode_choice: int = 0, pause: int = 0):
    """Roll the demonstrator from ``reset(task, seed)``; returns ``(episode, success, final_state)``.

    ``pause`` inserts that many idle steps the first time the pusher touches
    the block, mimicking an operator who stops to check alignment.
    """
    state = reset(task, seed)
    obs, acts = [], []
    paused = pause <= 0
    zero = np.zeros(task_spec(task).act_dim)
    while not is_done(state):
        if not paused and in_contact(state):
            paused = True
            for _ in range(pause):
                if is_done(state):
                    break
                obs.append(state.features())
                acts.append(zero)
                state = step(state, zero)
            continue
        a = demo_policy(state, mode_choice)
        obs.append(state.features())
        acts.append(a)
        state = step(state, a)
    spec = task_spec(task)
    ep = Episode(np.array(obs).reshape(-1, spec.obs_dim), np.array(acts).reshape(-1, spec.act_dim),
                 task, seed, mode_choice)
    return ep, is_success(state), state


@dataclass
class DatasetStats:
    failures: int = 0
    modes: list = field(default_factory=list)


def generate_dataset(task: str, n_episodes: int, seed: int, stats: DatasetStats | None = None) -> list:
    """``n_episodes`` successful demonstrations, deterministic in (task, seed)."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    task_spec(task)
    rng = np.random.Generator(np.random.PCG64(seed))
    episodes = []
    stats = stats if stats is not None else DatasetStats()
    while len(episodes) < n_episodes:
        sub_seed = int(rng.integers(0, 2**62))
        mode = int(rng.integers(0, 2))
        lo, hi = DEMO_PAUSE.get(task, (0, 0))
        pause = int(rng.integers(lo, hi + 1))
        ep, ok, _ = run_demo(task, sub_seed, mode, pause)
        if not ok or len(ep) == 0:
            stats.failures += 1
            continue
        stats.modes.append(mode)
        episodes.append(ep)
    return episodes
