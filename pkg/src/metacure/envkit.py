"""Task distributions: 2-D sparse-reward point navigation and small tabular MDPs."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

POINT_FAMILIES = ("point-robot-sparse", "point-robot-sparse-noise")
TABULAR_FAMILIES = ("tabular-bandit",)
FAMILIES = POINT_FAMILIES + TABULAR_FAMILIES

GOAL_RADIUS = 0.3
EPISODE_LENGTH = 32
ACTION_MAX = 0.1
CONTROL_COST = 0.1
NOISE_CENTER = (-0.6, 0.6)
NOISE_RADIUS = 0.3
NOISE_STD = 1.0


@dataclass
class TaskSpec:
    family: str
    kappa: np.ndarray
    goal: np.ndarray | None = None
    noise: tuple[tuple[float, float], float, float] | None = None
    # tabular: reward_probs[s, a, k] = P(r = reward_values[k] | s, a);
    # transitions[s, a, s'] = P(s' | s, a); init_probs[s] = P(s_0 = s)
    reward_values: np.ndarray | None = None
    reward_probs: np.ndarray | None = None
    transitions: np.ndarray | None = None
    init_probs: np.ndarray | None = None
    index: int = 0
    horizon: int = 3

    @property
    def is_tabular(self) -> bool:
        return self.family in TABULAR_FAMILIES

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]


@dataclass
class StepResult:
    obs: np.ndarray
    reward: float
    done: bool
    action: np.ndarray


@dataclass
class EnvState:
    """Mutable per-episode bookkeeping for one rollout."""

    pos: np.ndarray
    t: int = 0
    tab_state: int = 0
    obs: np.ndarray = field(default_factory=lambda: np.zeros(3))


# ---------------------------------------------------------------------------
# Family metadata
# ---------------------------------------------------------------------------


def obs_dim(family: str, n_states: int = 2) -> int:
    if family in POINT_FAMILIES:
        return 3
    if family in TABULAR_FAMILIES:
        return n_states
    raise ValueError(f"unknown task family {family!r}")


def action_dim(family: str, n_actions: int = 2) -> int:
    if family in POINT_FAMILIES:
        return 2
    if family in TABULAR_FAMILIES:
        # two arms share one coordinate (sign picks the arm); more arms use argmax
        return 1 if n_actions == 2 else n_actions
    raise ValueError(f"unknown task family {family!r}")


def action_bound(family: str) -> float:
    return ACTION_MAX if family in POINT_FAMILIES else 1.0


def kappa_dim(family: str, n_tasks: int = 2) -> int:
    return 2 if family in POINT_FAMILIES else n_tasks


def episode_length(family: str, horizon: int = 3) -> int:
    return EPISODE_LENGTH if family in POINT_FAMILIES else horizon


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample_tasks(rng: np.random.Generator, count: int, family: str,
                 tabular_set: list[TaskSpec] | None = None) -> list[TaskSpec]:
    if count < 1:
        raise ValueError("count must be >= 1")
    if family in POINT_FAMILIES:
        angles = rng.uniform(0.0, math.pi, size=count)
        tasks = []
        for i, th in enumerate(angles):
            goal = np.array([math.cos(th), math.sin(th)])
            noise = (NOISE_CENTER, NOISE_RADIUS, NOISE_STD) if family == "point-robot-sparse-noise" else None
            tasks.append(TaskSpec(family, kappa=goal.copy(), goal=goal, noise=noise, index=i))
        return tasks
    if family in TABULAR_FAMILIES:
        pool = tabular_set if tabular_set is not None else information_bandit_set()
        picks = rng.integers(0, len(pool), size=count)
        return [pool[int(p)] for p in picks]
    raise ValueError(f"unknown task family {family!r}")


def make_tabular_task(reward_values, reward_probs, transitions, init_probs=None,
                      index: int = 0, n_tasks: int = 2, horizon: int = 3) -> TaskSpec:
    reward_probs = np.asarray(reward_probs, dtype=float)
    transitions = np.asarray(transitions, dtype=float)
    n_states = transitions.shape[0]
    if init_probs is None:
        init_probs = np.eye(n_states)[0]
    init_probs = np.asarray(init_probs, dtype=float)
    for name, table in (("reward", reward_probs), ("transition", transitions)):
        if np.any(np.abs(table.sum(axis=-1) - 1.0) > 1e-12) or np.any(table < 0):
            raise ValueError(f"{name} rows must be probability distributions")
    if abs(init_probs.sum() - 1.0) > 1e-12:
        raise ValueError("initial-state distribution must sum to 1")
    return TaskSpec(
        "tabular-bandit",
        kappa=np.eye(n_tasks)[index],
        reward_values=np.asarray(reward_values, dtype=float),
        reward_probs=reward_probs,
        transitions=transitions,
        init_probs=init_probs,
        index=index,
        horizon=horizon,
    )


def information_bandit_set(n_tasks: int = 2) -> list[TaskSpec]:
    """Single-state bandits where arm 0 reveals the task and arm 1 does not.

    Task ``i`` pays reward ``i / (n_tasks - 1)`` on arm 0. Arm 1 always pays 0.5.
    """
    values = np.linspace(0.0, 1.0, n_tasks)
    reward_values = np.unique(np.concatenate([values, [0.5]]))
    tasks = []
    for i in range(n_tasks):
        probs = np.zeros((1, 2, len(reward_values)))
        probs[0, 0, np.searchsorted(reward_values, values[i])] = 1.0
        probs[0, 1, np.searchsorted(reward_values, 0.5)] = 1.0
        tasks.append(make_tabular_task(reward_values, probs, np.ones((1, 2, 1)), index=i, n_tasks=n_tasks))
    return tasks


def random_tabular_family(rng: np.random.Generator, n_tasks: int, n_states: int, n_actions: int,
                          bernoulli: bool = True, task_dependent_init: bool = False) -> list[TaskSpec]:
    """Random tasks with Bernoulli {0,1} rewards and random transition tables."""
    reward_values = np.array([0.0, 1.0])
    tasks = []
    shared_T = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    for i in range(n_tasks):
        if bernoulli:
            p1 = rng.uniform(0.05, 0.95, size=(n_states, n_actions))
        else:
            p1 = rng.integers(0, 2, size=(n_states, n_actions)).astype(float)
        reward_probs = np.stack([1.0 - p1, p1], axis=-1)
        T = shared_T if rng.random() < 0.5 else rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
        T = T / T.sum(axis=-1, keepdims=True)
        init = rng.dirichlet(np.ones(n_states)) if task_dependent_init else np.eye(n_states)[0]
        init = init / init.sum()
        tasks.append(make_tabular_task(reward_values, reward_probs, T, init, index=i, n_tasks=n_tasks))
    return tasks


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------


def in_noise_region(task: TaskSpec, pos: np.ndarray) -> bool:
    if task.noise is None:
        return False
    (cx, cy), radius, _ = task.noise
    return (pos[0] - cx) ** 2 + (pos[1] - cy) ** 2 <= radius * radius


def _noise_channel(task: TaskSpec, pos: np.ndarray, rng: np.random.Generator | None) -> float:
    if not in_noise_region(task, pos):
        return 0.0
    std = task.noise[2]
    if rng is None:
        raise ValueError("an rng is required to draw noise inside the noise region")
    return float(rng.normal(0.0, std))


def point_reward(goal: np.ndarray, pos: np.ndarray, action: np.ndarray) -> float:
    d = math.hypot(pos[0] - goal[0], pos[1] - goal[1])
    inside = 1.0 - d / GOAL_RADIUS if d <= GOAL_RADIUS else 0.0
    return inside - CONTROL_COST * float(action @ action)


def reset(task: TaskSpec, rng: np.random.Generator | None = None) -> tuple[np.ndarray, EnvState]:
    if task.is_tabular:
        if task.init_probs[0] == 1.0 or rng is None:
            s0 = int(np.argmax(task.init_probs))
        else:
            s0 = int(rng.choice(task.n_states, p=task.init_probs))
        obs = np.eye(task.n_states)[s0]
        return obs, EnvState(pos=np.zeros(2), tab_state=s0, obs=obs)
    pos = np.zeros(2)
    obs = np.array([0.0, 0.0, _noise_channel(task, pos, rng)])
    return obs, EnvState(pos=pos, obs=obs)


def tabular_arm(action: np.ndarray, n_actions: int) -> int:
    action = np.asarray(action, dtype=float).reshape(-1)
    if action.size == 1:
        return 0 if action[0] < 0.0 else 1
    return int(np.argmax(action[:n_actions]))


def arm_action(arm: int, width: int) -> np.ndarray:
    """Canonical action vector for a discrete arm (what the buffer records)."""
    if width == 1:
        return np.array([-1.0 if arm == 0 else 1.0])
    return 2.0 * np.eye(width)[arm] - 1.0


def step(task: TaskSpec, state: EnvState, action, rng: np.random.Generator) -> StepResult:
    """Advance ``state`` in place by one action."""
    if task.is_tabular:
        return _step_tabular(task, state, action, rng)
    a = np.clip(np.asarray(action, dtype=float).reshape(2), -ACTION_MAX, ACTION_MAX)
    state.pos = state.pos + a
    reward = point_reward(task.goal, state.pos, a)
    u = _noise_channel(task, state.pos, rng)
    state.t += 1
    obs = np.array([state.pos[0], state.pos[1], u])
    state.obs = obs
    return StepResult(obs, reward, state.t >= EPISODE_LENGTH, a)


def _step_tabular(task: TaskSpec, state: EnvState, action, rng) -> StepResult:
    a = np.clip(np.asarray(action, dtype=float).reshape(-1), -1.0, 1.0)
    arm = tabular_arm(a, task.n_actions)
    s = state.tab_state
    k = int(rng.choice(len(task.reward_values), p=task.reward_probs[s, arm]))
    s2 = int(rng.choice(task.n_states, p=task.transitions[s, arm]))
    state.tab_state = s2
    state.t += 1
    obs = np.eye(task.n_states)[s2]
    state.obs = obs
    return StepResult(obs, float(task.reward_values[k]), state.t >= task.horizon, arm_action(arm, a.size))


def exact_model(task: TaskSpec, s: int, a: int) -> dict[tuple[float, int], float]:
    """Exact distribution over (reward, next state) for a tabular task."""
    if not task.is_tabular:
        raise TypeError("exact_model is only defined for tabular tasks")
    out: dict[tuple[float, int], float] = {}
    for k, s2 in itertools.product(range(len(task.reward_values)), range(task.n_states)):
        p = task.reward_probs[s, a, k] * task.transitions[s, a, s2]
        if p > 0.0:
            key = (float(task.reward_values[k]), s2)
            out[key] = out.get(key, 0.0) + p
    return out
