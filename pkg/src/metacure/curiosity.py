"""Model predictors and the information-gain intrinsic reward.

The Meta-Predictor sees the posterior belief, the Task-Predictor sees the task
identification. Both regress (r, s') from (s, a); the intrinsic reward is the
difference of their squared prediction errors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk


@dataclass(frozen=True)
class IntrinsicConfig:
    lam: float = 0.3
    use_intrinsic: bool = True

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError("lam must be >= 0")


class Predictor:
    """MLP from (conditioning, s, a) to (r_hat, s'_hat)."""

    def __init__(self, name: str, cond_dim: int, state_dim: int, action_dim: int,
                 rng: np.random.Generator, hidden=(64, 64)) -> None:
        self.cond_dim = cond_dim
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.spec = nk.MlpSpec(name, cond_dim + state_dim + action_dim, tuple(hidden), 1 + state_dim)
        self.params = nk.ParamStore()
        nk.init_mlp(self.params, self.spec, rng)

    @property
    def output_width(self) -> int:
        return self.spec.output_width

    def _inputs(self, cond, s, a):
        s = np.atleast_2d(np.asarray(s, dtype=float))
        a = np.atleast_2d(np.asarray(a, dtype=float))
        if isinstance(cond, nk.Node):
            c = cond
            if c.shape[0] == 1 and s.shape[0] > 1:
                c = nk.mul(c, np.ones((s.shape[0], 1)))
            return nk.concat([c, nk.const(s), nk.const(a)], axis=1)
        c = np.atleast_2d(np.asarray(cond, dtype=float))
        if c.shape[0] == 1 and s.shape[0] > 1:
            c = np.repeat(c, s.shape[0], axis=0)
        if c.shape[1] != self.cond_dim or s.shape[1] != self.state_dim or a.shape[1] != self.action_dim:
            raise nk.ShapeError(
                f"{self.spec.name}: got cond/s/a widths {c.shape[1]}/{s.shape[1]}/{a.shape[1]}, "
                f"expected {self.cond_dim}/{self.state_dim}/{self.action_dim}"
            )
        return np.concatenate([c, s, a], axis=1)

    def predict(self, cond, s, a) -> np.ndarray:
        return nk.mlp_apply(self.params, self.spec, self._inputs(cond, s, a))

    def errors(self, cond, s, a, r, s2) -> np.ndarray:
        """Per-sample squared reward error plus squared next-state error."""
        out = self.predict(cond, s, a)
        target = _targets(r, s2)
        if target.shape[1] != out.shape[1]:
            raise nk.ShapeError(f"{self.spec.name}: targets have width {target.shape[1]}, outputs {out.shape[1]}")
        return np.sum((out - target) ** 2, axis=1)

    def loss(self, cond, s, a, r, s2) -> nk.Node:
        """Batch mean of :meth:`errors`, recorded for backprop."""
        out = nk.mlp_forward(self.params, self.spec, self._inputs(cond, s, a))
        target = _targets(r, s2)
        if target.shape[1] != out.shape[1]:
            raise nk.ShapeError(f"{self.spec.name}: targets have width {target.shape[1]}, outputs {out.shape[1]}")
        per = nk.sum(nk.square(nk.sub(out, target)), axis=1)
        return nk.mean(per)


def _targets(r, s2) -> np.ndarray:
    s2 = np.atleast_2d(np.asarray(s2, dtype=float))
    r = np.asarray(r, dtype=float).reshape(-1, 1)
    return np.concatenate([r, s2], axis=1)


class MetaPredictor(Predictor):
    def __init__(self, z_dim: int, state_dim: int, action_dim: int, rng, hidden=(64, 64), name="meta_pred"):
        super().__init__(name, 2 * z_dim, state_dim, action_dim, rng, hidden)


class TaskPredictor(Predictor):
    def __init__(self, kappa_dim: int, state_dim: int, action_dim: int, rng, hidden=(64, 64), name="task_pred"):
        super().__init__(name, kappa_dim, state_dim, action_dim, rng, hidden)


def meta_pred_loss(meta_predictor: Predictor, belief_before_t, transition) -> nk.Node:
    """L_pred: belief covers transitions strictly before t. ``transition`` is (s, a, r, s')."""
    s, a, r, s2 = transition
    return meta_predictor.loss(belief_before_t, s, a, r, s2)


def task_pred_loss(task_predictor: Predictor, kappa, transition) -> nk.Node:
    s, a, r, s2 = transition
    return task_predictor.loss(kappa, s, a, r, s2)


def intrinsic_reward(meta_predictor, task_predictor, belief_before_t, kappa, transition):
    """Meta-Predictor error minus Task-Predictor error; no graph is recorded.

    Predictors only need an ``errors(cond, s, a, r, s2)`` method, so exact
    negative log-likelihood models can stand in for the learned ones.
    Returns a float for a single transition and an array for a batch.
    """
    s, a, r, s2 = transition
    l_meta = np.asarray(meta_predictor.errors(belief_before_t, s, a, r, s2), dtype=float)
    l_task = np.asarray(task_predictor.errors(kappa, s, a, r, s2), dtype=float)
    out = l_meta - l_task
    return float(out[0]) if np.ndim(r) == 0 and out.size == 1 else out


def exploration_reward(cfg: IntrinsicConfig, r_int, r_ext):
    return r_int + cfg.lam * r_ext


def relabel_batch(meta_predictor, task_predictor, batch, kappa, cfg: IntrinsicConfig) -> np.ndarray:
    """Exploration rewards for a replay batch under the current predictor weights.

    Each element's Meta-Predictor input is the belief snapshot stored with it at
    collection time.
    """
    if getattr(batch, "belief", None) is None:
        raise ValueError("batch elements carry no belief snapshot of their context prefix")
    r_ext = np.asarray(batch.r, dtype=float)
    if not cfg.use_intrinsic:
        return cfg.lam * r_ext
    r_int = intrinsic_reward(meta_predictor, task_predictor, batch.belief, kappa,
                             (batch.s, batch.a, r_ext, batch.s2))
    return np.atleast_1d(r_int) + cfg.lam * r_ext
