"""Finite-difference checks of every training loss against its backward pass.

Each family builds small networks and a random batch from one seed, pins all
random draws and the TD target, then compares the accumulated gradients with
central differences coordinate by coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import agents, inference
from . import numkit as nk
from .curiosity import MetaPredictor, TaskPredictor

REL_TOL = 1e-4
REL_FLOOR = 1e-6
FD_EPS = 1e-4

FAMILIES = ("task_pred", "meta_pred", "elbo", "q_exploiter", "pi_exploiter", "q_explorer", "pi_explorer")

STATE_DIM, ACTION_DIM, Z_DIM, KAPPA_DIM = 3, 2, 2, 2
HIDDEN = (6, 5)
BATCH, CONTEXT = 7, 4


@dataclass
class CheckResult:
    family: str
    draws: int
    worst_error: float
    worst_param: str
    worst_index: int
    analytic: float
    numeric: float

    @property
    def passed(self) -> bool:
        return self.worst_error <= REL_TOL

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        out = f"{status} {self.family:<13} draws={self.draws} worst_rel_err={self.worst_error:.3e}"
        if not self.passed:
            out += (f" at {self.worst_param}[{self.worst_index}] "
                    f"analytic={self.analytic:.6e} numeric={self.numeric:.6e}")
        return out


def _batch(rng: np.random.Generator, belief_dim: int) -> agents.Batch:
    n = BATCH
    return agents.Batch(
        s=rng.normal(size=(n, STATE_DIM)),
        a=rng.uniform(-0.1, 0.1, size=(n, ACTION_DIM)),
        r=rng.normal(size=n),
        s2=rng.normal(size=(n, STATE_DIM)),
        done=np.zeros(n, dtype=bool),
        belief=np.concatenate([rng.normal(size=(n, Z_DIM)), np.log(rng.uniform(0.2, 1.0, (n, Z_DIM)))], axis=1),
        belief_next=np.concatenate([rng.normal(size=(n, Z_DIM)),
                                    np.log(rng.uniform(0.2, 1.0, (n, Z_DIM)))], axis=1)
        if belief_dim else None,
        source=np.zeros(n, dtype=np.int8),
        task_id=0,
    )


def _context(rng) -> np.ndarray:
    return rng.normal(size=(CONTEXT, 2 * STATE_DIM + ACTION_DIM + 1))


def _setup(family: str, rng: np.random.Generator) -> tuple[Callable[[], nk.Node], list[nk.ParamStore]]:
    """Return a deterministic loss builder and the stores to check."""
    cfg = agents.SacConfig(gamma=0.9, alpha=0.1, beta=1.0)
    batch = _batch(rng, 2 * Z_DIM)
    tr = (batch.s, batch.a, batch.r, batch.s2)
    if family == "task_pred":
        pred = TaskPredictor(KAPPA_DIM, STATE_DIM, ACTION_DIM, rng, HIDDEN)
        kappa = rng.normal(size=(1, KAPPA_DIM))
        return (lambda: pred.loss(kappa, *tr)), [pred.params]
    if family == "meta_pred":
        pred = MetaPredictor(Z_DIM, STATE_DIM, ACTION_DIM, rng, HIDDEN)
        enc = inference.Encoder(_context(rng).shape[1], rng, Z_DIM, HIDDEN)
        ctx = _context(rng)

        def meta_loss():
            mean, var = enc.infer(ctx)
            return pred.loss(inference.belief_vector_graph(mean, var), *tr)

        return meta_loss, [pred.params, enc.params]
    if family in ("elbo", "q_exploiter", "pi_exploiter"):
        enc = inference.Encoder(_context(rng).shape[1], rng, Z_DIM, HIDDEN)
        policy = agents.PolicyNet("exploiter", STATE_DIM, Z_DIM, ACTION_DIM, 0.1, rng, HIDDEN)
        qf = agents.QNet("q_exploiter", STATE_DIM, ACTION_DIM, Z_DIM, rng, True, HIDDEN)
        ctx = _context(rng)
        z_noise = rng.normal(size=(1, Z_DIM))
        pi_noise = rng.normal(size=(BATCH, ACTION_DIM))
        target = rng.normal(size=BATCH)

        def losses():
            return agents.exploiter_losses(policy, qf, enc, batch, ctx, cfg, rng, z_noise=z_noise,
                                           pi_noise=pi_noise, target=target)

        if family == "elbo":
            return (lambda: losses()["critic"]), [enc.params]
        if family == "q_exploiter":
            return (lambda: losses()["td"]), [qf.params]
        return (lambda: losses()["actor"]), [policy.params]
    if family in ("q_explorer", "pi_explorer"):
        policy = agents.PolicyNet("explorer", STATE_DIM, 2 * Z_DIM, ACTION_DIM, 0.1, rng, HIDDEN)
        qf = agents.QNet("q_explorer", STATE_DIM, ACTION_DIM, 2 * Z_DIM, rng, True, HIDDEN)
        rewards = rng.normal(size=BATCH)
        pi_noise = rng.normal(size=(BATCH, ACTION_DIM))
        target = rng.normal(size=BATCH)

        def losses():
            return agents.explorer_losses(policy, qf, batch, rewards, cfg, rng, pi_noise=pi_noise, target=target)

        key = "td" if family == "q_explorer" else "actor"
        return (lambda: losses()[key]), [qf.params if family == "q_explorer" else policy.params]
    raise ValueError(f"unknown loss family {family!r}")


def check_family(family: str, seed: int, draws: int = 10) -> CheckResult:
    worst = CheckResult(family, draws, 0.0, "", -1, 0.0, 0.0)
    for d in range(draws):
        rng = np.random.default_rng([seed, FAMILIES.index(family), d])
        build, stores = _setup(family, rng)
        for store in stores:
            store.zero_grad()
        nk.backward(build())
        for store in stores:
            analytic = {n: store.entries[n].grad.copy() for n in store.names()}
            numeric = nk.finite_diff_grad(lambda: build().value[0], store, eps=FD_EPS)
            for name in store.names():
                a, b = analytic[name].ravel(), numeric[name].ravel()
                err = np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_FLOOR)
                i = int(np.argmax(err))
                if err[i] > worst.worst_error:
                    worst = CheckResult(family, draws, float(err[i]), name, i, float(a[i]), float(b[i]))
            store.zero_grad()
    return worst


def run_all(seed: int, draws: int = 10, families=FAMILIES) -> list[CheckResult]:
    return [check_family(f, seed, draws) for f in families]
