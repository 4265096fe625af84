"""Exact task-information quantities on small tabular task families.

Everything here is computed by enumerating every trajectory a policy can
produce. Two independent routes are kept on purpose: full-trajectory
likelihood ratios for the mutual information, and sequential posterior
predictive log-ratios (plus the initial-state term) for its decomposition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import envkit

PROB_TOL = 1e-12
DROP_THRESHOLD = 1e-15
MAX_DROPPED = 1e-12
MAX_TRAJECTORIES = 200_000

Step = tuple[int, float, int]  # (action, reward, next state)


class ZeroProbabilityError(ValueError):
    pass


class EnumerationBudgetError(RuntimeError):
    pass


@dataclass
class TaskPrior:
    tasks: list[envkit.TaskSpec]
    probs: np.ndarray

    def __post_init__(self) -> None:
        self.probs = np.asarray(self.probs, dtype=float)
        if len(self.tasks) != len(self.probs):
            raise ValueError("one prior probability per task is required")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > PROB_TOL:
            raise ValueError("task prior must be a probability distribution")
        shapes = {t.transitions.shape for t in self.tasks}
        if len(shapes) != 1:
            raise ValueError("tasks must share state and action spaces")

    @classmethod
    def uniform(cls, tasks: list[envkit.TaskSpec]) -> "TaskPrior":
        return cls(list(tasks), np.full(len(tasks), 1.0 / len(tasks)))

    @property
    def n_states(self) -> int:
        return self.tasks[0].n_states

    @property
    def n_actions(self) -> int:
        return self.tasks[0].n_actions

    def init_marginal(self) -> np.ndarray:
        return sum(p * t.init_probs for p, t in zip(self.probs, self.tasks))


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------


class TabularPolicy:
    """Task-blind policy: (s0, steps so far, current state) -> action distribution."""

    def __init__(self, n_actions: int, fn: Callable[[int, tuple, int], Sequence[float]]) -> None:
        self.n_actions = n_actions
        self._fn = fn

    def probs(self, s0: int, steps: tuple, state: int) -> np.ndarray:
        p = np.asarray(self._fn(s0, steps, state), dtype=float)
        if p.shape != (self.n_actions,) or np.any(p < 0) or abs(p.sum() - 1.0) > PROB_TOL:
            raise ValueError(f"policy returned an invalid action distribution {p}")
        return p

    @classmethod
    def constant(cls, probs: Sequence[float]) -> "TabularPolicy":
        p = np.asarray(probs, dtype=float)
        return cls(len(p), lambda s0, steps, state: p)

    @classmethod
    def random_history(cls, n_actions: int, rng: np.random.Generator) -> "TabularPolicy":
        """A fresh random distribution for every distinct history, memoised so
        repeated queries agree."""
        table: dict = {}

        def fn(s0, steps, state):
            key = (s0, steps, state)
            if key not in table:
                table[key] = rng.dirichlet(np.ones(n_actions))
            return table[key]

        return cls(n_actions, fn)


# ---------------------------------------------------------------------------
# Enumeration
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryDistribution:
    """Joint (trajectory, task) probabilities. A trajectory is (s0, steps)."""

    entries: list[tuple[tuple[int, tuple], int, float]]
    dropped_mass: float = 0.0
    env_likelihood: dict = field(default_factory=dict)

    def total(self) -> float:
        return float(sum(p for _, _, p in self.entries))


def _outcomes(task: envkit.TaskSpec, s: int, a: int) -> dict[tuple[float, int], float]:
    return envkit.exact_model(task, s, a)


def enumerate_trajectories(prior: TaskPrior, policy: TabularPolicy, H: int,
                           budget: int = MAX_TRAJECTORIES) -> TrajectoryDistribution:
    """Every (trajectory, task) pair with its joint probability p(kappa) p(c | kappa).

    Entries below ``DROP_THRESHOLD`` are discarded and their mass tracked.
    ``env_likelihood[(traj, k)]`` holds p(c | kappa) without policy factors.
    """
    if H < 1:
        raise ValueError("H must be >= 1")
    entries = []
    env_like: dict = {}
    dropped = 0.0
    for k, (pk, task) in enumerate(zip(prior.probs, prior.tasks)):
        if pk == 0.0:
            continue
        stack = [(s0, s0, (), pk * task.init_probs[s0], task.init_probs[s0])
                 for s0 in range(task.n_states) if task.init_probs[s0] > 0.0]
        while stack:
            s0, s, steps, joint, env = stack.pop()
            if joint < DROP_THRESHOLD:
                dropped += joint
                continue
            if len(steps) == H:
                entries.append(((s0, steps), k, joint))
                env_like[((s0, steps), k)] = env
                if len(entries) > budget:
                    raise EnumerationBudgetError(f"more than {budget} trajectories")
                continue
            pa = policy.probs(s0, steps, s)
            for a in range(prior.n_actions):
                if pa[a] == 0.0:
                    continue
                for (r, s2), po in _outcomes(task, s, a).items():
                    stack.append((s0, s2, steps + ((a, r, s2),), joint * pa[a] * po, env * po))
    if dropped >= MAX_DROPPED:
        raise EnumerationBudgetError(f"dropped probability mass {dropped:.3g} exceeds {MAX_DROPPED}")
    return TrajectoryDistribution(entries, dropped, env_like)


# ---------------------------------------------------------------------------
# Posterior quantities
# ---------------------------------------------------------------------------


def _as_steps(context) -> tuple[int | None, list[tuple[int, int, float, int]]]:
    """Accept either (s0, steps) or a list of (s, a, r, s') tuples."""
    if isinstance(context, tuple) and len(context) == 2 and isinstance(context[0], (int, np.integer)):
        s0, steps = context
        out, s = [], s0
        for a, r, s2 in steps:
            out.append((s, a, r, s2))
            s = s2
        return int(s0), out
    return None, [tuple(t) for t in context]


def exact_posterior(prior: TaskPrior, context, policy: TabularPolicy | None = None,
                    include_initial: bool = True) -> np.ndarray:
    """Bayes posterior over tasks given an ordered context.

    ``context`` is a trajectory ``(s0, ((a, r, s'), ...))`` or a list of
    ``(s, a, r, s')`` transitions. Policy terms cancel and are never used.
    """
    s0, trans = _as_steps(context)
    w = prior.probs.copy()
    if s0 is not None and include_initial:
        w = w * np.array([t.init_probs[s0] for t in prior.tasks])
    for s, a, r, s2 in trans:
        w = w * np.array([_outcomes(t, s, a).get((float(r), s2), 0.0) for t in prior.tasks])
    total = w.sum()
    if total <= 0.0:
        raise ZeroProbabilityError("context has zero probability under every task")
    return w / total


def exact_pred_prob(prior: TaskPrior, context, s: int, a: int) -> dict[tuple[float, int], float]:
    """Posterior predictive distribution over (r, s') after ``context``."""
    post = exact_posterior(prior, context)
    out: dict[tuple[float, int], float] = {}
    for pk, task in zip(post, prior.tasks):
        if pk == 0.0:
            continue
        for key, p in _outcomes(task, s, a).items():
            out[key] = out.get(key, 0.0) + pk * p
    return out


def exact_mutual_information(prior: TaskPrior, policy: TabularPolicy, H: int,
                             include_policy: bool = True) -> float:
    """I(C_{:H}; K) in nats from full-trajectory likelihoods.

    With ``include_policy`` the policy's action probabilities are part of every
    likelihood; without, only environment factors are used. The two agree
    because the policy never sees the task.
    """
    dist = enumerate_trajectories(prior, policy, H)
    cond: dict = {}
    for traj, k, joint in dist.entries:
        cond[(traj, k)] = joint / prior.probs[k] if include_policy else dist.env_likelihood[(traj, k)]
    marginal: dict = {}
    for (traj, k), p in cond.items():
        marginal[traj] = marginal.get(traj, 0.0) + prior.probs[k] * p
    mi = 0.0
    for traj, k, joint in dist.entries:
        mi += joint * (math.log(cond[(traj, k)]) - math.log(marginal[traj]))
    return mi


def initial_state_const(prior: TaskPrior) -> float:
    """E[log p0^kappa(s0) / p0(s0)] over tasks and initial states."""
    p0 = prior.init_marginal()
    const = 0.0
    for pk, task in zip(prior.probs, prior.tasks):
        for s0 in range(task.n_states):
            q = task.init_probs[s0]
            if pk > 0.0 and q > 0.0:
                const += pk * q * (math.log(q) - math.log(p0[s0]))
    return const


def oracle_intrinsic_trace(prior: TaskPrior, policy: TabularPolicy | None, trajectory,
                           task: int) -> list[float]:
    """log p(r, s' | kappa, s, a) - log p(r, s' | c_{:t}, a) for each step."""
    s0, trans = _as_steps(trajectory)
    t_spec = prior.tasks[task]
    out = []
    for t, (s, a, r, s2) in enumerate(trans):
        p_task = _outcomes(t_spec, s, a).get((float(r), s2), 0.0)
        if p_task <= 0.0:
            raise ZeroProbabilityError(f"step {t} is impossible under task {task}")
        prefix = (s0, tuple((aa, rr, ss) for _, aa, rr, ss in trans[:t])) if s0 is not None else trans[:t]
        p_pred = exact_pred_prob(prior, prefix, s, a)[(float(r), s2)]
        out.append(math.log(p_task) - math.log(p_pred))
    return out


@dataclass
class Decomposition:
    lhs: float
    rhs: float
    const: float
    log_ratio_sum: float

    @property
    def diff(self) -> float:
        return abs(self.lhs - self.rhs)


def verify_decomposition(prior: TaskPrior, policy: TabularPolicy, H: int,
                         const_offset: float = 0.0) -> Decomposition:
    """Mutual information against expected summed intrinsic log-ratios plus the
    initial-state constant. ``const_offset`` perturbs the constant (negative control)."""
    lhs = exact_mutual_information(prior, policy, H)
    dist = enumerate_trajectories(prior, policy, H)
    expected = 0.0
    for traj, k, joint in dist.entries:
        expected += joint * sum(oracle_intrinsic_trace(prior, policy, traj, k))
    const = initial_state_const(prior) + const_offset
    return Decomposition(lhs, expected + const, const, expected)


# ---------------------------------------------------------------------------
# Exact predictors with the learned-predictor interface
# ---------------------------------------------------------------------------


class ExactModel:
    """Negative log-likelihood of (r, s') under a mixture over tasks.

    ``errors(cond, s, a, r, s2)`` takes the task weights as ``cond`` (a
    posterior for the meta model, a one-hot identification for the task model),
    one-hot states, and actions in the environment's encoding.
    """

    def __init__(self, prior: TaskPrior) -> None:
        self.prior = prior

    def errors(self, cond, s, a, r, s2) -> np.ndarray:
        cond = np.atleast_2d(np.asarray(cond, dtype=float))
        s = np.atleast_2d(s)
        a = np.atleast_2d(a)
        s2 = np.atleast_2d(s2)
        r = np.atleast_1d(np.asarray(r, dtype=float))
        out = np.empty(len(s))
        for i in range(len(s)):
            w = cond[i if len(cond) > 1 else 0]
            si, s2i = int(np.argmax(s[i])), int(np.argmax(s2[i]))
            arm = envkit.tabular_arm(a[i], self.prior.n_actions)
            p = sum(wk * _outcomes(t, si, arm).get((float(r[i]), s2i), 0.0)
                    for wk, t in zip(w, self.prior.tasks))
            out[i] = -math.log(p) if p > 0 else math.inf
        return out


# ---------------------------------------------------------------------------
# Instances
# ---------------------------------------------------------------------------


def deterministic_bandit_pair() -> TaskPrior:
    """Two equiprobable tasks: arm 0 pays 0 or 1 depending on the task, arm 1 pays 0.5."""
    return TaskPrior.uniform(envkit.information_bandit_set(2))


def bernoulli_bandit_pair(p: float = 0.8) -> TaskPrior:
    """Two tasks whose arm 0 pays 1 with probability p and 1 - p."""
    values = np.array([0.0, 1.0])
    tasks = []
    for i, q in enumerate((p, 1.0 - p)):
        probs = np.array([[[1.0 - q, q], [0.5, 0.5]]])
        tasks.append(envkit.make_tabular_task(values, probs, np.ones((1, 2, 1)), index=i))
    return TaskPrior.uniform(tasks)


@dataclass
class Instance:
    seed: int
    index: int
    prior: TaskPrior
    policy: TabularPolicy
    H: int

    def describe(self) -> str:
        lines = [f"instance {self.index} (seed {self.seed}): {len(self.prior.tasks)} tasks, "
                 f"{self.prior.n_states} states, {self.prior.n_actions} actions, H={self.H}",
                 f"  prior {np.array2string(self.prior.probs, precision=6)}"]
        for k, t in enumerate(self.prior.tasks):
            lines.append(f"  task {k}: init {np.array2string(t.init_probs, precision=6)}")
            lines.append(f"    P(r=1|s,a) {np.array2string(t.reward_probs[..., 1], precision=6)}")
            lines.append(f"    P(s'|s,a) {np.array2string(t.transitions, precision=6)}")
        return "\n".join(lines)


def random_instance(rng: np.random.Generator, seed: int = 0, index: int = 0) -> Instance:
    n_tasks = int(rng.integers(2, 4))
    H = int(rng.integers(1, 4))
    n_states = int(rng.integers(1, 3)) if H == 3 else int(rng.integers(1, 4))
    n_actions = 2 if H == 3 else int(rng.integers(2, 4))
    task_init = bool(rng.random() < 0.4) and n_states > 1
    tasks = envkit.random_tabular_family(rng, n_tasks, n_states, n_actions,
                                         bernoulli=bool(rng.random() < 0.8), task_dependent_init=task_init)
    probs = rng.dirichlet(np.ones(n_tasks))
    return Instance(seed, index, TaskPrior(tasks, probs), TabularPolicy.random_history(n_actions, rng), H)


def random_instances(count: int, seed: int) -> list[Instance]:
    rng = np.random.default_rng(seed)
    return [random_instance(rng, seed, i) for i in range(count)]
