"""Meta-training and adaptation loops, the posterior-sampling baseline, evaluation
and intrinsic-reward heatmaps."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import agents, envkit, inference
from . import numkit as nk
from .curiosity import IntrinsicConfig, MetaPredictor, TaskPredictor, intrinsic_reward, relabel_batch

log = logging.getLogger(__name__)

VARIANTS = ("full", "no-intrinsic", "lambda0", "separate-buffers", "separate-encoders",
            "no-exploiter", "posterior-sampling")
ABLATIONS = ("no-intrinsic", "lambda0", "separate-buffers", "separate-encoders", "no-exploiter")

LOSS_KEYS = ("l_pred", "l_pred_task", "q_exploiter", "pi_exploiter", "kl", "q_explorer", "pi_explorer")
METRIC_COLUMNS = ("iteration", "env_steps") + LOSS_KEYS + ("eval_mean_return", "success_rate")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    family: str = "point-robot-sparse"
    variant: str = "full"
    seed: int = 0
    n_train_tasks: int = 20
    n_test_tasks: int = 20
    adapt_episodes: int = 4
    episode_length: int = 32
    env_step_budget: int = 300_000
    train_steps: int = 100
    batch_size: int = 96
    context_len: int = 0
    lam: float = 0.3
    beta: float = 1.0
    gamma: float = 0.99
    alpha: float = 0.1
    tau: float = 0.005
    lr: float = 3e-4
    reward_scale: float = 1.0
    twin_q: bool = True
    z_dim: int = 5
    buffer_capacity: int = 100_000
    eval_interval: int = 10
    checkpoint_interval: int = 10
    eval_seeds: int = 1
    tabular_tasks: int = 2
    encoder_hidden: int = 64
    predictor_hidden: int = 64
    agent_hidden: int = 128

    def validate(self) -> None:
        errors = []
        if self.family not in envkit.FAMILIES:
            errors.append(f"family: unknown task family {self.family!r}")
        if self.variant not in VARIANTS:
            errors.append(f"variant: unknown variant {self.variant!r} (choose from {', '.join(VARIANTS)})")
        if self.adapt_episodes < 2:
            errors.append("adapt_episodes: need at least one exploration and one exploitation episode (>= 2)")
        if self.n_train_tasks < 2:
            errors.append("n_train_tasks: meta-training needs at least 2 tasks")
        for name in ("n_test_tasks", "episode_length", "train_steps", "batch_size", "z_dim",
                     "buffer_capacity", "eval_interval", "checkpoint_interval", "eval_seeds",
                     "env_step_budget", "encoder_hidden", "predictor_hidden", "agent_hidden"):
            if getattr(self, name) < 1:
                errors.append(f"{name}: must be >= 1")
        if self.context_len < 0:
            errors.append("context_len: must be >= 0 (0 means all exploration steps)")
        if self.lam < 0:
            errors.append("lam: must be >= 0")
        if self.beta < 0:
            errors.append("beta: must be >= 0")
        if not 0.0 <= self.gamma < 1.0:
            errors.append("gamma: must lie in [0, 1)")
        if not 0.0 < self.tau <= 1.0:
            errors.append("tau: must lie in (0, 1]")
        if self.alpha < 0 or self.lr <= 0:
            errors.append("alpha must be >= 0 and lr > 0")
        if self.reward_scale <= 0:
            errors.append("reward_scale: must be > 0")
        if self.family in envkit.POINT_FAMILIES and self.episode_length != envkit.EPISODE_LENGTH:
            errors.append(f"episode_length: point-robot episodes are {envkit.EPISODE_LENGTH} steps")
        if self.env_step_budget < self.steps_per_iteration:
            errors.append("env_step_budget: smaller than one collection iteration")
        if errors:
            raise ConfigError("; ".join(errors))

    @property
    def steps_per_iteration(self) -> int:
        return self.n_train_tasks * self.adapt_episodes * self.episode_length

    @property
    def iterations(self) -> int:
        return self.env_step_budget // self.steps_per_iteration

    @property
    def context_max(self) -> int:
        return self.context_len or (self.adapt_episodes - 1) * self.episode_length

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# ---------------------------------------------------------------------------
# The learning system
# ---------------------------------------------------------------------------


class MetaCure:
    """All learned components plus the per-task replay buffers."""

    def __init__(self, cfg: TrainConfig, train_tasks: list[envkit.TaskSpec], rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.variant = cfg.variant
        self.train_tasks = train_tasks
        fam = cfg.family
        n_states = train_tasks[0].n_states if train_tasks[0].is_tabular else 2
        n_actions = train_tasks[0].n_actions if train_tasks[0].is_tabular else 2
        self.state_dim = envkit.obs_dim(fam, n_states)
        self.action_dim = envkit.action_dim(fam, n_actions)
        self.kappa_dim = len(train_tasks[0].kappa)
        self.action_bound = envkit.action_bound(fam)
        tdim = 2 * self.state_dim + self.action_dim + 1
        z = cfg.z_dim
        self.sac = agents.SacConfig(cfg.gamma, cfg.alpha, cfg.tau, cfg.lr, cfg.beta, cfg.reward_scale)
        self.intrinsic = IntrinsicConfig(0.0 if cfg.variant == "lambda0" else cfg.lam,
                                         use_intrinsic=cfg.variant != "no-intrinsic")
        eh, ph, ah = (cfg.encoder_hidden,) * 2, (cfg.predictor_hidden,) * 2, (cfg.agent_hidden,) * 2

        self.encoder = inference.Encoder(tdim, rng, z, eh, "encoder")
        # encoder used by the explorer and Meta-Predictor; a second one only when separated
        self.explore_encoder = (inference.Encoder(tdim, rng, z, eh, "encoder_explore")
                                if cfg.variant == "separate-encoders" else self.encoder)

        self.has_explorer = cfg.variant != "posterior-sampling"
        self.has_exploiter = cfg.variant != "no-exploiter"
        self.has_predictors = self.has_explorer
        if self.has_explorer:
            self.explorer = agents.PolicyNet("explorer", self.state_dim, 2 * z, self.action_dim,
                                             self.action_bound, rng, ah)
            self.q_explorer = agents.QNet("q_explorer", self.state_dim, self.action_dim, 2 * z, rng,
                                          cfg.twin_q, ah)
            self.meta_pred = MetaPredictor(z, self.state_dim, self.action_dim, rng, ph)
            self.task_pred = TaskPredictor(self.kappa_dim, self.state_dim, self.action_dim, rng, ph)
        if self.has_exploiter:
            self.exploiter = agents.PolicyNet("exploiter", self.state_dim, z, self.action_dim,
                                              self.action_bound, rng, ah)
            self.q_exploiter = agents.QNet("q_exploiter", self.state_dim, self.action_dim, z, rng,
                                           cfg.twin_q, ah)

        def make_buffer(i):
            return agents.ReplayBuffer(i, self.state_dim, self.action_dim, 2 * z, cfg.buffer_capacity)

        self.explorer_buffers = [make_buffer(i) for i in range(len(train_tasks))]
        if cfg.variant == "separate-buffers":
            self.exploiter_buffers = [make_buffer(i) for i in range(len(train_tasks))]
        else:
            self.exploiter_buffers = self.explorer_buffers

    # -- parameters ---------------------------------------------------------

    def stores(self) -> dict[str, nk.ParamStore]:
        out = {"encoder": self.encoder.params}
        if self.explore_encoder is not self.encoder:
            out["encoder_explore"] = self.explore_encoder.params
        if self.has_explorer:
            out.update(explorer=self.explorer.params, q_explorer=self.q_explorer.params,
                       q_explorer_target=self.q_explorer.target,
                       meta_pred=self.meta_pred.params, task_pred=self.task_pred.params)
        if self.has_exploiter:
            out.update(exploiter=self.exploiter.params, q_exploiter=self.q_exploiter.params,
                       q_exploiter_target=self.q_exploiter.target)
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {}
        for key, store in self.stores().items():
            prefix = "target." if key.endswith("_target") else ""
            arrays.update(nk.store_arrays(store, prefix))
        return arrays

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for key, store in self.stores().items():
            store.load_values(arrays, "target." if key.endswith("_target") else "")

    # -- acting -------------------------------------------------------------

    def explore_action(self, obs, belief_vec, rng, deterministic=False):
        return agents.act(self.explorer, obs, belief_vec, rng, deterministic)

    def exploit_action(self, obs, z, rng, deterministic=False):
        return agents.act(self.exploiter, obs, z, rng, deterministic)

    # -- training -----------------------------------------------------------

    def train_step(self, m: int, rng: np.random.Generator) -> dict[str, float]:
        """One inner training step on task ``m``: predictors, exploiter, then explorer."""
        cfg = self.cfg
        task = self.train_tasks[m]
        ebuf, xbuf = self.explorer_buffers[m], self.exploiter_buffers[m]
        context = ebuf.sample_context(rng, cfg.context_max)
        stats: dict[str, float] = {}

        if self.has_predictors:
            e_batch = ebuf.sample_batch(rng, cfg.batch_size)
            tr = (e_batch.s, e_batch.a, e_batch.r, e_batch.s2)
            lt = self.task_pred.loss(task.kappa[None, :], *tr)
            nk.backward(lt)
            nk.adam_step(self.task_pred.params, cfg.lr)
            # snapshot term fits the intrinsic-reward estimator; the fresh-context
            # term carries Meta-Predictor gradients into the encoder
            lm = self.meta_pred.loss(e_batch.belief, *tr)
            mean, var = self.explore_encoder.infer(context)
            fresh = self.meta_pred.loss(inference.belief_vector_graph(mean, var), *tr)
            total = nk.add(lm, fresh)
            if not self.has_exploiter and cfg.beta > 0:
                total = nk.add(total, nk.mul(inference.kl_to_prior_graph(mean, var), cfg.beta))
            nk.backward(total)
            nk.adam_step(self.meta_pred.params, cfg.lr)
            if self.explore_encoder is not self.encoder or not self.has_exploiter:
                nk.adam_step(self.explore_encoder.params, cfg.lr)
            stats["l_pred"] = float(lm.value[0])
            stats["l_pred_task"] = float(lt.value[0])

        if self.has_exploiter:
            x_batch = xbuf.sample_batch(rng, cfg.batch_size)
            stats.update(agents.sac_update_exploiter(
                self.exploiter, self.q_exploiter, self.encoder, x_batch, context, self.sac, rng,
                context_task_id=ebuf.task_id))

        if self.has_explorer:
            rewards = relabel_batch(self.meta_pred, self.task_pred, e_batch, task.kappa[None, :], self.intrinsic)
            stats.update(agents.sac_update_explorer(self.explorer, self.q_explorer, e_batch, rewards,
                                                    self.sac, rng))
        return stats


# ---------------------------------------------------------------------------
# Adaptation
# ---------------------------------------------------------------------------


@dataclass
class AdaptationResult:
    context: np.ndarray
    transitions: list[agents.Transition]
    episode_returns: list[float]
    final_return: float
    success: bool
    actors: list[str]
    positions: list[np.ndarray]
    z_samples: int = 0


def _episode(task, system: MetaCure, T, rng, running: inference.RunningBelief, episode_idx: int,
             actor: str, phase: int, z=None, deterministic=False, encoder=None):
    obs, st = envkit.reset(task, rng)
    encoder = encoder or system.explore_encoder
    out, positions, ret, success = [], [obs[:2].copy()], 0.0, False
    for t in range(T):
        bvec = running.belief().as_vector()
        if actor == "explorer":
            a = system.explore_action(obs, bvec, rng, deterministic)
        else:
            a = system.exploit_action(obs, z, rng, deterministic)
        res = envkit.step(task, st, a, rng)
        vec = inference.transition_vector(obs, res.action, res.reward, res.obs)
        running.update(encoder.factor(vec))
        out.append(agents.Transition(obs, res.action, res.reward, res.obs, res.done, episode_idx, t,
                                     bvec, running.belief().as_vector(), phase))
        ret += res.reward
        if not task.is_tabular:
            success |= bool(np.hypot(*(st.pos - task.goal)) <= envkit.GOAL_RADIUS)
        positions.append(res.obs[:2].copy())
        obs = res.obs
    return out, ret, success, np.array(positions)


def run_adaptation(task: envkit.TaskSpec, system: MetaCure, E: int, T: int, rng: np.random.Generator,
                   deterministic: bool = True) -> AdaptationResult:
    """E-1 explorer episodes that grow the context, then one exploiter episode.

    ``deterministic`` selects the exploiter's mean action (evaluation); the
    explorer always samples.
    """
    if E < 2:
        raise ValueError("E must be >= 2")
    if system.variant == "posterior-sampling":
        return run_posterior_sampling(task, system, E, T, rng, deterministic)
    running = inference.RunningBelief(system.cfg.z_dim)
    transitions, returns, actors, positions = [], [], [], []
    for ep in range(E - 1):
        trs, ret, _, pos = _episode(task, system, T, rng, running, ep, "explorer", agents.EXPLORE)
        transitions += trs
        returns.append(ret)
        actors.append("explorer")
        positions.append(pos)
    context = np.array([tr.vector() for tr in transitions])
    if system.has_exploiter:
        if system.explore_encoder is system.encoder:
            belief = running.belief()
        else:
            belief = system.encoder.belief(context)
        z = inference.sample_z(belief.mean, belief.var, rng)
        trs, ret, success, pos = _episode(task, system, T, rng, running, E - 1, "exploiter", agents.EXPLOIT,
                                          z=z, deterministic=deterministic)
        actors.append("exploiter")
    else:
        trs, ret, success, pos = _episode(task, system, T, rng, running, E - 1, "explorer", agents.EXPLOIT,
                                          deterministic=deterministic)
        actors.append("explorer")
    transitions += trs
    returns.append(ret)
    positions.append(pos)
    return AdaptationResult(context, transitions, returns, ret, success, actors, positions,
                            z_samples=1 if system.has_exploiter else 0)


def run_posterior_sampling(task, system: MetaCure, E: int, T: int, rng, deterministic: bool = True
                           ) -> AdaptationResult:
    """Baseline adaptation: a fresh z from q(z|c) at every episode start, exploiter acts."""
    running = inference.RunningBelief(system.cfg.z_dim)
    transitions, returns, actors, positions = [], [], [], []
    success = False
    for ep in range(E):
        belief = running.belief()
        z = inference.sample_z(belief.mean, belief.var, rng)
        phase = agents.EXPLORE if ep < E - 1 else agents.EXPLOIT
        trs, ret, success, pos = _episode(task, system, T, rng, running, ep, "exploiter", phase,
                                          z=z, deterministic=deterministic, encoder=system.encoder)
        transitions += trs
        returns.append(ret)
        actors.append("exploiter")
        positions.append(pos)
    n_ctx = (E - 1) * T
    context = np.array([tr.vector() for tr in transitions[:n_ctx]])
    return AdaptationResult(context, transitions, returns, returns[-1], success, actors, positions,
                            z_samples=E)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    task_final_returns: list[float]
    task_success: list[bool]
    episode_returns: list[list[float]]
    mean_final_return: float = 0.0
    success_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.task_final_returns:
            self.mean_final_return = float(np.mean(self.task_final_returns))
            self.success_rate = float(np.mean(self.task_success))


def evaluate(system: MetaCure, test_tasks: list[envkit.TaskSpec], E: int, T: int,
             seeds: list[int]) -> EvalReport:
    """Final-episode return and success averaged over tasks x seeds."""
    finals, succ, per_ep = [], [], []
    for seed in seeds:
        for task in test_tasks:
            rng = np.random.default_rng([seed, task.index])
            res = run_adaptation(task, system, E, T, rng, deterministic=True)
            finals.append(res.final_return)
            succ.append(res.success)
            per_ep.append(res.episode_returns)
    return EvalReport(finals, succ, per_ep)


# ---------------------------------------------------------------------------
# Meta-training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    system: MetaCure
    metrics: list[dict]
    checkpoints: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)
    test_tasks: list[envkit.TaskSpec] = field(default_factory=list)
    env_steps: int = 0


def make_tasks(cfg: TrainConfig) -> tuple[list[envkit.TaskSpec], list[envkit.TaskSpec]]:
    ss = np.random.SeedSequence(cfg.seed)
    train_rng, test_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    if cfg.family in envkit.TABULAR_FAMILIES:
        pool = envkit.information_bandit_set(cfg.tabular_tasks)
        for t in pool:
            t.horizon = cfg.episode_length
        train = [pool[i % len(pool)] for i in range(cfg.n_train_tasks)]
        train = [envkit.TaskSpec(**{**asdict_task(t), "index": i}) for i, t in enumerate(train)]
        test = envkit.sample_tasks(test_rng, cfg.n_test_tasks, cfg.family, pool)
        test = [envkit.TaskSpec(**{**asdict_task(t), "index": i}) for i, t in enumerate(test)]
        return train, test
    train = envkit.sample_tasks(train_rng, cfg.n_train_tasks, cfg.family)
    test = envkit.sample_tasks(test_rng, cfg.n_test_tasks, cfg.family)
    return train, test


def asdict_task(t: envkit.TaskSpec) -> dict:
    return {f.name: getattr(t, f.name) for f in fields(t)}


def _rngs(cfg: TrainConfig):
    ss = np.random.SeedSequence([cfg.seed, 1])
    init_ss, train_ss, collect_ss = ss.spawn(3)
    collect = [np.random.default_rng(s) for s in collect_ss.spawn(cfg.n_train_tasks)]
    return np.random.default_rng(init_ss), np.random.default_rng(train_ss), collect


def collect(system: MetaCure, m: int, rng: np.random.Generator) -> AdaptationResult:
    """Run one stochastic adaptation phase on training task ``m`` and store it."""
    cfg = system.cfg
    res = run_adaptation(system.train_tasks[m], system, cfg.adapt_episodes, cfg.episode_length, rng,
                         deterministic=False)
    if system.exploiter_buffers is system.explorer_buffers:
        system.explorer_buffers[m].add_run(res.transitions)
    else:
        # separate stores: exploration-phase data to the explorer, the rest to the exploiter
        system.explorer_buffers[m].add_run([t for t in res.transitions if t.source == agents.EXPLORE])
        system.exploiter_buffers[m].add_run([t for t in res.transitions if t.source == agents.EXPLOIT])
    return res


def meta_train(cfg: TrainConfig, on_iteration: Callable[[dict, MetaCure, int], None] | None = None,
               workers: int = 1) -> TrainResult:
    """Alternate collection over all tasks with training over all tasks.

    ``on_iteration(row, system, iteration)`` is called after every iteration
    (for metric logging and checkpointing).
    """
    cfg.validate()
    train_tasks, test_tasks = make_tasks(cfg)
    init_rng, train_rng, collect_rngs = _rngs(cfg)
    system = MetaCure(cfg, train_tasks, init_rng)
    metrics: list[dict] = []
    result = TrainResult(system, metrics, test_tasks=test_tasks)
    env_steps = 0
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for it in range(1, cfg.iterations + 1):
            if pool is None:
                for m in range(len(train_tasks)):
                    collect(system, m, collect_rngs[m])
            else:
                list(pool.map(lambda m: collect(system, m, collect_rngs[m]), range(len(train_tasks))))
            env_steps += cfg.steps_per_iteration
            sums = {k: 0.0 for k in LOSS_KEYS}
            counts = {k: 0 for k in LOSS_KEYS}
            for _ in range(cfg.train_steps):
                for m in range(len(train_tasks)):
                    for k, v in system.train_step(m, train_rng).items():
                        sums[k] += v
                        counts[k] += 1
            row = {"iteration": it, "env_steps": env_steps}
            row.update({k: (sums[k] / counts[k] if counts[k] else "") for k in LOSS_KEYS})
            if it % cfg.eval_interval == 0 or it == cfg.iterations:
                rep = evaluate(system, test_tasks, cfg.adapt_episodes, cfg.episode_length,
                               list(range(cfg.eval_seeds)))
                row["eval_mean_return"] = rep.mean_final_return
                row["success_rate"] = rep.success_rate
            else:
                row["eval_mean_return"] = ""
                row["success_rate"] = ""
            metrics.append(row)
            if it % cfg.checkpoint_interval == 0 or it == cfg.iterations:
                result.checkpoints[it] = system.state_arrays()
            log.info("iter %d steps %d %s", it, env_steps,
                     " ".join(f"{k}={row[k]:.4g}" for k in METRIC_COLUMNS[2:] if row[k] != ""))
            if on_iteration is not None:
                on_iteration(row, system, it)
    finally:
        if pool is not None:
            pool.shutdown()
    result.env_steps = env_steps
    return result


def run_posterior_sampling_baseline(cfg: TrainConfig, **kwargs) -> TrainResult:
    """PEARL-style baseline: encoder + exploiter only, same pipeline otherwise."""
    base = TrainConfig(**{**asdict(cfg), "variant": "posterior-sampling"})
    return meta_train(base, **kwargs)


def run_ablation(cfg: TrainConfig, variant: str, **kwargs) -> TrainResult:
    if variant not in ABLATIONS:
        raise ConfigError(f"unknown ablation {variant!r}; choose from {', '.join(ABLATIONS)}")
    return meta_train(TrainConfig(**{**asdict(cfg), "variant": variant}), **kwargs)


# ---------------------------------------------------------------------------
# Analysis
# ---------------------------------------------------------------------------

DEFAULT_PROBES = ((envkit.ACTION_MAX, 0.0), (-envkit.ACTION_MAX, 0.0),
                  (0.0, envkit.ACTION_MAX), (0.0, -envkit.ACTION_MAX))


@dataclass
class Heatmap:
    xs: np.ndarray
    ys: np.ndarray
    r_int: np.ndarray
    l_pred: np.ndarray
    l_task: np.ndarray


def heatmap_intrinsic(system: MetaCure, tasks: list[envkit.TaskSpec], grid_n: int = 31,
                      probe_actions=DEFAULT_PROBES, extent: float = 1.5, seed: int = 0,
                      meta_predictor=None, task_predictor=None) -> Heatmap:
    """Intrinsic reward at every cell of a [-extent, extent]^2 grid.

    Each cell is probed with the given actions from that position, with the
    empty-context (prior) belief, and averaged over ``tasks``. Grid index is
    [row = y, col = x].
    """
    meta = meta_predictor or system.meta_pred
    taskp = task_predictor or system.task_pred
    rng = np.random.default_rng(seed)
    xs = np.linspace(-extent, extent, grid_n)
    ys = np.linspace(-extent, extent, grid_n)
    gx, gy = np.meshgrid(xs, ys)
    pos = np.stack([gx.ravel(), gy.ravel()], axis=1)
    prior_vec = inference.prior_belief(system.cfg.z_dim).as_vector()[None, :]
    l_pred = np.zeros(len(pos))
    l_task = np.zeros(len(pos))
    n = 0
    for task in tasks:
        for probe in probe_actions:
            a = np.clip(np.asarray(probe, dtype=float), -envkit.ACTION_MAX, envkit.ACTION_MAX)
            s = np.zeros((len(pos), 3))
            s2 = np.zeros((len(pos), 3))
            s[:, :2] = pos
            s2[:, :2] = pos + a
            r = np.empty(len(pos))
            for i in range(len(pos)):
                s[i, 2] = envkit._noise_channel(task, pos[i], rng)
                s2[i, 2] = envkit._noise_channel(task, s2[i, :2], rng)
                r[i] = envkit.point_reward(task.goal, s2[i, :2], a)
            acts = np.repeat(a[None, :], len(pos), axis=0)
            l_pred += meta.errors(prior_vec, s, acts, r, s2)
            l_task += taskp.errors(task.kappa[None, :], s, acts, r, s2)
            n += 1
    shape = (grid_n, grid_n)
    l_pred, l_task = (l_pred / n).reshape(shape), (l_task / n).reshape(shape)
    return Heatmap(xs, ys, l_pred - l_task, l_pred, l_task)


def region_means(hm: Heatmap) -> dict[str, float]:
    """Mean intrinsic reward over the goal band and over the near-origin disk."""
    gx, gy = np.meshgrid(hm.xs, hm.ys)
    rad = np.hypot(gx, gy)
    band = (np.abs(rad - 1.0) <= envkit.GOAL_RADIUS) & (gy >= 0)
    origin = rad <= envkit.GOAL_RADIUS
    def mean(mask):
        return float(hm.r_int[mask].mean()) if mask.any() else math.nan

    return {"goal_band": mean(band), "origin": mean(origin)}


def noise_region_stats(system: MetaCure) -> dict[str, float]:
    """Prediction errors and intrinsic reward over stored transitions whose next
    position lies in the noise region, under the current predictors."""
    l_pred, l_task, r_int = [], [], []
    for m, task in enumerate(system.train_tasks):
        buf = system.explorer_buffers[m]
        n = len(buf)
        if task.noise is None or n == 0:
            continue
        (cx, cy), radius, _ = task.noise
        inside = np.hypot(buf.s2[:n, 0] - cx, buf.s2[:n, 1] - cy) <= radius
        if not inside.any():
            continue
        idx = np.flatnonzero(inside)
        tr = (buf.s[idx], buf.a[idx], buf.r[idx], buf.s2[idx])
        lp = system.meta_pred.errors(buf.belief[idx], *tr)
        lt = system.task_pred.errors(task.kappa[None, :], *tr)
        l_pred.append(lp)
        l_task.append(lt)
        r_int.append(np.atleast_1d(intrinsic_reward(system.meta_pred, system.task_pred,
                                                    buf.belief[idx], task.kappa[None, :], tr)))
    if not l_pred:
        return {"count": 0, "l_pred": math.nan, "l_pred_task": math.nan, "r_int": math.nan,
                "abs_r_int": math.nan}
    l_pred, l_task, r_int = (np.concatenate(x) for x in (l_pred, l_task, r_int))
    return {"count": int(len(l_pred)), "l_pred": float(l_pred.mean()),
            "l_pred_task": float(l_task.mean()), "r_int": float(r_int.mean()),
            "abs_r_int": float(np.abs(r_int).mean())}


def first_step_below(metrics: list[dict], key: str, threshold: float) -> float:
    for row in metrics:
        v = row.get(key, "")
        if v != "" and float(v) <= threshold:
            return float(row["env_steps"])
    return math.inf


def angular_spread(positions: np.ndarray) -> float:
    """Range of polar angles visited outside a small disk around the origin."""
    pos = np.asarray(positions)
    far = np.hypot(pos[:, 0], pos[:, 1]) > 0.2
    if far.sum() < 2:
        return 0.0
    ang = np.arctan2(pos[far, 1], pos[far, 0])
    return float(ang.max() - ang.min())
