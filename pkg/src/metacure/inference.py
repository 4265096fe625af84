"""Context encoder: per-transition Gaussian factors multiplied with an N(0, I) prior."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk

Z_DIM = 5
VAR_FLOOR = 1e-7
VAR_CEIL = 1e7


@dataclass
class GaussianFactor:
    mean: np.ndarray
    var: np.ndarray


@dataclass
class PosteriorBelief:
    mean: np.ndarray
    var: np.ndarray

    def as_vector(self) -> np.ndarray:
        """(mean, log-variance) concatenation used as a policy/predictor input."""
        return np.concatenate([self.mean, np.log(self.var)])


def prior_belief(z_dim: int = Z_DIM) -> PosteriorBelief:
    return PosteriorBelief(np.zeros(z_dim), np.ones(z_dim))


def transition_vector(s, a, r, s2) -> np.ndarray:
    return np.concatenate([np.ravel(s), np.ravel(a), [float(r)], np.ravel(s2)])


def encoder_spec(transition_dim: int, z_dim: int = Z_DIM, hidden=(64, 64), name: str = "encoder") -> nk.MlpSpec:
    return nk.MlpSpec(name, transition_dim, tuple(hidden), 2 * z_dim)


def _split_output(raw: nk.Node, z_dim: int) -> tuple[nk.Node, nk.Node]:
    mean = raw[:, :z_dim]
    var = nk.clip(nk.softplus(raw[:, z_dim:]), VAR_FLOOR, VAR_CEIL)
    return mean, var


def encode_transition(params: nk.ParamStore, spec: nk.MlpSpec, transitions) -> tuple[nk.Node, nk.Node]:
    """Factor means and variances for a (n, transition_dim) batch, recorded in the graph."""
    x = np.atleast_2d(np.asarray(transitions, dtype=float))
    return _split_output(nk.mlp_forward(params, spec, x), spec.output_width // 2)


def encode_factors(params: nk.ParamStore, spec: nk.MlpSpec, transitions) -> list[GaussianFactor]:
    x = np.atleast_2d(np.asarray(transitions, dtype=float))
    raw = nk.mlp_apply(params, spec, x)
    z = spec.output_width // 2
    var = np.clip(np.logaddexp(0.0, raw[:, z:]), VAR_FLOOR, VAR_CEIL)
    return [GaussianFactor(raw[i, :z].copy(), var[i].copy()) for i in range(len(x))]


def combine(factors: list[GaussianFactor], z_dim: int = Z_DIM) -> PosteriorBelief:
    """Product of the prior N(0, I) with every factor."""
    precision = np.ones(z_dim)
    weighted = np.zeros(z_dim)
    for f in factors:
        if np.any(f.var <= 0):
            raise ValueError("factor variances must be positive")
        precision = precision + 1.0 / f.var
        weighted = weighted + f.mean / f.var
    return PosteriorBelief(weighted / precision, 1.0 / precision)


def product(factors: list[GaussianFactor]) -> GaussianFactor:
    """Product of the factors alone (no prior)."""
    if not factors:
        raise ValueError("product of no factors is undefined")
    precision = sum(1.0 / f.var for f in factors)
    weighted = sum(f.mean / f.var for f in factors)
    return GaussianFactor(weighted / precision, 1.0 / precision)


def combine_graph(mean: nk.Node, var: nk.Node) -> tuple[nk.Node, nk.Node]:
    """Differentiable :func:`combine` over the rows of a factor batch; returns (1, z) nodes."""
    inv = nk.div(1.0, var)
    precision = nk.add(1.0, nk.sum(inv, axis=0, keepdims=True))
    weighted = nk.sum(nk.mul(mean, inv), axis=0, keepdims=True)
    post_var = nk.div(1.0, precision)
    return nk.mul(weighted, post_var), post_var


def infer(params: nk.ParamStore, spec: nk.MlpSpec, context: np.ndarray) -> tuple[nk.Node, nk.Node]:
    """Graph posterior for one context array of shape (n, transition_dim); n may be 0."""
    z = spec.output_width // 2
    if len(context) == 0:
        return nk.const(np.zeros((1, z))), nk.const(np.ones((1, z)))
    mean, var = encode_transition(params, spec, context)
    return combine_graph(mean, var)


class Encoder:
    """Context encoder parameters plus the graph and plain inference paths."""

    def __init__(self, transition_dim: int, rng: np.random.Generator, z_dim: int = Z_DIM,
                 hidden=(64, 64), name: str = "encoder") -> None:
        self.z_dim = z_dim
        self.spec = encoder_spec(transition_dim, z_dim, hidden, name)
        self.params = nk.ParamStore()
        nk.init_mlp(self.params, self.spec, rng)

    def infer(self, context: np.ndarray) -> tuple[nk.Node, nk.Node]:
        return infer(self.params, self.spec, context)

    def factors(self, context: np.ndarray) -> list[GaussianFactor]:
        return encode_factors(self.params, self.spec, context)

    def factor(self, vector: np.ndarray) -> GaussianFactor:
        return self.factors(vector[None, :])[0]

    def belief(self, context: np.ndarray) -> PosteriorBelief:
        if len(context) == 0:
            return prior_belief(self.z_dim)
        return combine(self.factors(context), self.z_dim)


class RunningBelief:
    """Incremental product-of-Gaussians used while acting.

    Precision-weighted sums let the belief absorb one transition at a time.
    """

    def __init__(self, z_dim: int = Z_DIM) -> None:
        self.precision = np.ones(z_dim)
        self.weighted = np.zeros(z_dim)
        self.count = 0

    def update(self, factor: GaussianFactor) -> None:
        self.precision = self.precision + 1.0 / factor.var
        self.weighted = self.weighted + factor.mean / factor.var
        self.count += 1

    def belief(self) -> PosteriorBelief:
        return PosteriorBelief(self.weighted / self.precision, 1.0 / self.precision)


def kl_to_prior(belief: PosteriorBelief) -> float:
    mean, var = np.asarray(belief.mean), np.asarray(belief.var)
    if np.any(var <= 0):
        raise ValueError("variance must be positive")
    return float(0.5 * np.sum(var + mean * mean - 1.0 - np.log(var)))


def kl_to_prior_graph(mean: nk.Node, var: nk.Node) -> nk.Node:
    terms = nk.sub(nk.add(var, nk.square(mean)), nk.add(1.0, nk.log(var)))
    return nk.mul(nk.sum(terms), 0.5)


def elbo_loss(mean: nk.Node, var: nk.Node, q_pred: nk.Node, td_target, beta: float) -> nk.Node:
    """Mean squared TD error plus ``beta`` times the KL of the belief to the prior."""
    if q_pred.shape[0] == 0:
        raise ValueError("empty batch")
    if beta < 0:
        raise ValueError("beta must be >= 0")
    td = nk.mean(nk.square(nk.sub(q_pred, td_target)))
    if beta == 0:
        return td
    return nk.add(td, nk.mul(kl_to_prior_graph(mean, var), beta))


def sample_z(mean, var, rng: np.random.Generator, noise: np.ndarray | None = None):
    """Reparameterised draw ``mean + sqrt(var) * eps``.

    Works on nodes (recorded) or arrays (plain). ``noise`` overrides the draw.
    """
    shape = mean.shape
    eps = rng.standard_normal(shape) if noise is None else np.asarray(noise).reshape(shape)
    if isinstance(mean, nk.Node) or isinstance(var, nk.Node):
        return nk.add(mean, nk.mul(nk.sqrt(var), eps))
    return np.asarray(mean) + np.sqrt(np.asarray(var)) * eps


def belief_vector_graph(mean: nk.Node, var: nk.Node) -> nk.Node:
    return nk.concat([mean, nk.log(var)], axis=1)
