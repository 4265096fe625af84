"""Explorer and Exploiter policies, twin Q critics, SAC updates and replay buffers."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import inference
from . import numkit as nk

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

EXPLORE = 0
EXPLOIT = 1


# ---------------------------------------------------------------------------
# Experience storage
# ---------------------------------------------------------------------------


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s2: np.ndarray
    done: bool
    episode: int
    t: int
    belief: np.ndarray
    belief_next: np.ndarray
    source: int = EXPLORE

    def vector(self) -> np.ndarray:
        return inference.transition_vector(self.s, self.a, self.r, self.s2)


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    done: np.ndarray
    belief: np.ndarray
    belief_next: np.ndarray
    source: np.ndarray
    task_id: int

    def __len__(self) -> int:
        return len(self.r)


class ReplayBuffer:
    """Fixed-capacity FIFO store for one task.

    Runs (one adaptation phase each) are added whole; their exploration
    episodes are remembered so contexts can be drawn as ordered prefixes.
    """

    def __init__(self, task_id: int, state_dim: int, action_dim: int, belief_dim: int,
                 capacity: int = 100_000) -> None:
        self.task_id = task_id
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity, dtype=bool)
        self.episode = np.zeros(capacity, dtype=np.int64)
        self.t = np.zeros(capacity, dtype=np.int64)
        self.belief = np.zeros((capacity, belief_dim))
        self.belief_next = np.zeros((capacity, belief_dim))
        self.source = np.zeros(capacity, dtype=np.int8)
        self.total = 0
        # (absolute start, length) of each run's exploration segment
        self._explore_runs: list[tuple[int, int]] = []

    def __len__(self) -> int:
        return min(self.total, self.capacity)

    def add(self, tr: Transition) -> None:
        i = self.total % self.capacity
        self.s[i] = tr.s
        self.a[i] = tr.a
        self.r[i] = tr.r
        self.s2[i] = tr.s2
        self.done[i] = tr.done
        self.episode[i] = tr.episode
        self.t[i] = tr.t
        self.belief[i] = tr.belief
        self.belief_next[i] = tr.belief_next
        self.source[i] = tr.source
        self.total += 1

    def add_run(self, transitions: list[Transition]) -> None:
        """Append one run; its leading EXPLORE transitions become a context source."""
        start = self.total
        n_explore = 0
        for tr in transitions:
            if tr.source == EXPLORE and n_explore == self.total - start:
                n_explore += 1
            self.add(tr)
        if n_explore:
            self._explore_runs.append((start, n_explore))

    def _valid_runs(self) -> list[tuple[int, int]]:
        oldest = self.total - len(self)
        return [(st, n) for st, n in self._explore_runs if st >= oldest]

    def num_explore_runs(self) -> int:
        return len(self._valid_runs())

    def sample_batch(self, rng: np.random.Generator, batch_size: int) -> Batch:
        if len(self) == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, len(self), size=batch_size)
        return self._gather(idx)

    def _gather(self, idx: np.ndarray) -> Batch:
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx],
                     self.belief[idx], self.belief_next[idx], self.source[idx], self.task_id)

    def sample_context(self, rng: np.random.Generator, max_len: int) -> np.ndarray:
        """Ordered prefix of one stored exploration segment, as transition vectors."""
        runs = self._valid_runs()
        if not runs:
            raise ValueError("buffer holds no exploration episodes to draw a context from")
        start, n = runs[int(rng.integers(0, len(runs)))]
        length = int(rng.integers(1, min(max_len, n) + 1))
        idx = (start + np.arange(length)) % self.capacity
        return np.concatenate(
            [self.s[idx], self.a[idx], self.r[idx, None], self.s2[idx]], axis=1
        )

    def context_indices(self, rng: np.random.Generator, max_len: int) -> np.ndarray:
        runs = self._valid_runs()
        start, n = runs[int(rng.integers(0, len(runs)))]
        length = int(rng.integers(1, min(max_len, n) + 1))
        return (start + np.arange(length)) % self.capacity


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------


def _squash_log_det(u):
    """log(1 - tanh(u)^2), stable for large |u|."""
    if isinstance(u, nk.Node):
        inner = nk.add(u, nk.softplus(nk.mul(u, -2.0)))
        return nk.mul(nk.sub(math.log(2.0), inner), 2.0)
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


class PolicyNet:
    """Tanh-squashed Gaussian policy over ``action_dim`` dimensions."""

    def __init__(self, name: str, state_dim: int, cond_dim: int, action_dim: int,
                 action_bound: float, rng: np.random.Generator, hidden=(128, 128)) -> None:
        self.name = name
        self.state_dim = state_dim
        self.cond_dim = cond_dim
        self.action_dim = action_dim
        self.action_bound = action_bound
        self.spec = nk.MlpSpec(name, state_dim + cond_dim, tuple(hidden), 2 * action_dim)
        self.params = nk.ParamStore()
        nk.init_mlp(self.params, self.spec, rng)

    def _x(self, s, cond) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, dtype=float))
        cond = np.atleast_2d(np.asarray(cond, dtype=float))
        if cond.shape[0] == 1 and s.shape[0] > 1:
            cond = np.repeat(cond, s.shape[0], axis=0)
        if cond.shape[1] != self.cond_dim:
            raise nk.ShapeError(f"{self.name}: conditioning width {cond.shape[1]} != {self.cond_dim}")
        return np.concatenate([s, cond], axis=1)

    def mean_log_std(self, s, cond) -> tuple[np.ndarray, np.ndarray]:
        out = nk.mlp_apply(self.params, self.spec, self._x(s, cond))
        d = self.action_dim
        return out[:, :d], np.clip(out[:, d:], LOG_STD_MIN, LOG_STD_MAX)

    def sample(self, s, cond, rng: np.random.Generator, noise: np.ndarray | None = None):
        """Unrecorded reparameterised sample; returns (actions, log-probs)."""
        mean, log_std = self.mean_log_std(s, cond)
        eps = rng.standard_normal(mean.shape) if noise is None else noise
        u = mean + np.exp(log_std) * eps
        logp = np.sum(-0.5 * eps * eps - log_std - _HALF_LOG_2PI - _squash_log_det(u)
                      - math.log(self.action_bound), axis=1)
        return self.action_bound * np.tanh(u), logp

    def sample_graph(self, s, cond: nk.Node | np.ndarray, noise: np.ndarray):
        """Recorded sample with fixed standard-normal ``noise``; returns (action, log-prob) nodes."""
        s = np.atleast_2d(np.asarray(s, dtype=float))
        if isinstance(cond, nk.Node):
            c = cond if cond.shape[0] == s.shape[0] else nk.mul(cond, np.ones((s.shape[0], 1)))
            x = nk.concat([nk.const(s), c], axis=1)
        else:
            x = self._x(s, cond)
        out = nk.mlp_forward(self.params, self.spec, x)
        d = self.action_dim
        mean = out[:, :d]
        log_std = nk.clip(out[:, d:], LOG_STD_MIN, LOG_STD_MAX)
        u = nk.add(mean, nk.mul(nk.exp(log_std), noise))
        log_det = _squash_log_det(u)
        per = nk.add(nk.add(log_std, log_det), _HALF_LOG_2PI + math.log(self.action_bound) + 0.5 * noise * noise)
        logp = nk.neg(nk.sum(per, axis=1, keepdims=True))
        return nk.mul(nk.tanh(u), self.action_bound), logp


def act(policy: PolicyNet, s, cond, rng: np.random.Generator, deterministic: bool = False) -> np.ndarray:
    if deterministic:
        mean, _ = policy.mean_log_std(s, cond)
        return policy.action_bound * np.tanh(mean[0])
    a, _ = policy.sample(s, cond, rng)
    return a[0]


class QNet:
    """One or two Q heads over (s, a, conditioning) with Polyak-averaged targets."""

    def __init__(self, name: str, state_dim: int, action_dim: int, cond_dim: int,
                 rng: np.random.Generator, twin: bool = True, hidden=(128, 128)) -> None:
        self.name = name
        self.cond_dim = cond_dim
        width = state_dim + action_dim + cond_dim
        n_heads = 2 if twin else 1
        self.specs = [nk.MlpSpec(f"{name}.q{i}", width, tuple(hidden), 1) for i in range(n_heads)]
        self.params = nk.ParamStore()
        for spec in self.specs:
            nk.init_mlp(self.params, spec, rng)
        self.target = self.params.clone()

    def _x(self, s, a, cond) -> np.ndarray:
        s = np.atleast_2d(s)
        cond = np.atleast_2d(cond)
        if cond.shape[0] == 1 and s.shape[0] > 1:
            cond = np.repeat(cond, s.shape[0], axis=0)
        return np.concatenate([s, np.atleast_2d(a), cond], axis=1)

    def heads_graph(self, s, a, cond, frozen: bool = False) -> list[nk.Node]:
        s = np.atleast_2d(np.asarray(s, dtype=float))
        parts = [nk.const(s), a if isinstance(a, nk.Node) else nk.const(np.atleast_2d(a))]
        if isinstance(cond, nk.Node):
            parts.append(cond if cond.shape[0] == s.shape[0] else nk.mul(cond, np.ones((s.shape[0], 1))))
        else:
            c = np.atleast_2d(cond)
            parts.append(nk.const(np.repeat(c, s.shape[0], axis=0) if c.shape[0] == 1 else c))
        x = nk.concat(parts, axis=1)
        return [nk.mlp_forward(self.params, spec, x, frozen=frozen) for spec in self.specs]

    def min_target(self, s, a, cond) -> np.ndarray:
        x = self._x(s, a, cond)
        vals = [nk.mlp_apply(self.target, spec, x)[:, 0] for spec in self.specs]
        return np.minimum.reduce(vals)

    def values(self, s, a, cond) -> list[np.ndarray]:
        x = self._x(s, a, cond)
        return [nk.mlp_apply(self.params, spec, x)[:, 0] for spec in self.specs]


def polyak_update(target: nk.ParamStore, online: nk.ParamStore, tau: float) -> None:
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must lie in (0, 1]")
    for name, e in target.entries.items():
        src = online.entries[name].value
        if src.shape != e.value.shape:
            raise nk.ShapeError(f"{name}: shapes {e.value.shape} and {src.shape} differ")
        e.value *= 1.0 - tau
        e.value += tau * src


# ---------------------------------------------------------------------------
# SAC updates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SacConfig:
    gamma: float = 0.99
    alpha: float = 0.1
    tau: float = 0.005
    lr: float = 3e-4
    beta: float = 1.0
    reward_scale: float = 1.0


def _min_nodes(heads: list[nk.Node]) -> nk.Node:
    out = heads[0]
    for h in heads[1:]:
        out = nk.minimum(out, h)
    return out


def q_loss_graph(qf: QNet, batch: Batch, cond, target: np.ndarray) -> tuple[nk.Node, list[nk.Node]]:
    """Mean over heads of the squared TD error; also returns the head nodes."""
    heads = qf.heads_graph(batch.s, batch.a, cond)
    target = target.reshape(-1, 1)
    loss = nk.mean(nk.square(nk.sub(heads[0], target)))
    for h in heads[1:]:
        loss = nk.add(loss, nk.mean(nk.square(nk.sub(h, target))))
    return nk.mul(loss, 1.0 / len(heads)), heads


def td_target(policy: PolicyNet, qf: QNet, rewards, s2, cond_next, cfg: SacConfig,
              rng: np.random.Generator, noise: np.ndarray | None = None) -> np.ndarray:
    a2, logp2 = policy.sample(s2, cond_next, rng, noise=noise)
    v_next = qf.min_target(s2, a2, cond_next) - cfg.alpha * logp2
    return cfg.reward_scale * np.asarray(rewards, dtype=float) + cfg.gamma * v_next


def policy_loss_graph(policy: PolicyNet, qf: QNet, s, cond, alpha: float, noise: np.ndarray) -> nk.Node:
    """Entropy-regularised KL-to-Boltzmann loss; Q weights are held fixed."""
    a, logp = policy.sample_graph(s, cond, noise)
    q = _min_nodes(qf.heads_graph(s, a, cond, frozen=True))
    return nk.mean(nk.sub(nk.mul(logp, alpha), q))


def exploiter_losses(policy: PolicyNet, qf: QNet, encoder: inference.Encoder, batch: Batch,
                     context: np.ndarray, cfg: SacConfig, rng: np.random.Generator,
                     z_noise=None, next_noise=None, pi_noise=None,
                     context_task_id: int | None = None, target: np.ndarray | None = None
                     ) -> dict[str, nk.Node]:
    """Graphs for one exploiter step.

    ``critic`` is the encoder ELBO: TD error of Q(s, a, z) with z drawn from
    q(z|context) plus beta * KL. ``actor`` uses the same z with its gradient
    stopped. Noise arguments pin the random draws and ``target`` pins the TD
    target (for gradient checks).
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if context.shape[0] == 0:
        raise ValueError("empty context batch")
    if context_task_id is not None and context_task_id != batch.task_id:
        raise ValueError("context and batch come from different tasks")
    mean, var = encoder.infer(context)
    z = inference.sample_z(mean, var, rng, noise=z_noise)
    z_bar = z.value
    if target is None:
        target = td_target(policy, qf, batch.r, batch.s2, z_bar, cfg, rng, noise=next_noise)
    td, _ = q_loss_graph(qf, batch, z, target)
    kl = inference.kl_to_prior_graph(mean, var)
    critic = td if cfg.beta == 0 else nk.add(td, nk.mul(kl, cfg.beta))
    if pi_noise is None:
        pi_noise = rng.standard_normal((len(batch), policy.action_dim))
    actor = policy_loss_graph(policy, qf, batch.s, z_bar, cfg.alpha, pi_noise)
    return {"critic": critic, "actor": actor, "td": td, "kl": kl, "target": target}


def explorer_losses(policy: PolicyNet, qf: QNet, batch: Batch, rewards: np.ndarray,
                    cfg: SacConfig, rng: np.random.Generator,
                    next_noise=None, pi_noise=None, target: np.ndarray | None = None
                    ) -> dict[str, nk.Node]:
    """Graphs for one explorer step; conditioning is the stored belief snapshot.

    The TD target bootstraps from the post-transition snapshot ``belief_next``.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if batch.belief is None or batch.belief_next is None:
        raise ValueError("explorer batches need belief snapshots for c and c'")
    if target is None:
        target = td_target(policy, qf, rewards, batch.s2, batch.belief_next, cfg, rng, noise=next_noise)
    td, _ = q_loss_graph(qf, batch, batch.belief, target)
    if pi_noise is None:
        pi_noise = rng.standard_normal((len(batch), policy.action_dim))
    actor = policy_loss_graph(policy, qf, batch.s, batch.belief, cfg.alpha, pi_noise)
    return {"critic": td, "actor": actor, "td": td, "target": target}


def sac_update_exploiter(policy: PolicyNet, qf: QNet, encoder: inference.Encoder, batch: Batch,
                         context: np.ndarray, cfg: SacConfig, rng: np.random.Generator,
                         step_encoder: bool = True, context_task_id: int | None = None) -> dict[str, float]:
    """Joint critic/encoder and policy step for the exploiter.

    The encoder's gradient slots may already hold contributions from other
    losses of the same training step; they are consumed here when
    ``step_encoder`` is set.
    """
    losses = exploiter_losses(policy, qf, encoder, batch, context, cfg, rng,
                              context_task_id=context_task_id)
    # both graphs are differentiated before any weight moves
    nk.backward(losses["critic"])
    nk.backward(losses["actor"])
    nk.adam_step(qf.params, cfg.lr)
    if step_encoder:
        nk.adam_step(encoder.params, cfg.lr)
    nk.adam_step(policy.params, cfg.lr)
    polyak_update(qf.target, qf.params, cfg.tau)
    return {"q_exploiter": float(losses["td"].value[0]), "pi_exploiter": float(losses["actor"].value[0]),
            "kl": float(losses["kl"].value[0])}


def sac_update_explorer(policy: PolicyNet, qf: QNet, batch: Batch, rewards: np.ndarray,
                        cfg: SacConfig, rng: np.random.Generator) -> dict[str, float]:
    losses = explorer_losses(policy, qf, batch, rewards, cfg, rng)
    nk.backward(losses["critic"])
    nk.backward(losses["actor"])
    nk.adam_step(qf.params, cfg.lr)
    nk.adam_step(policy.params, cfg.lr)
    polyak_update(qf.target, qf.params, cfg.tau)
    return {"q_explorer": float(losses["td"].value[0]), "pi_explorer": float(losses["actor"].value[0])}
