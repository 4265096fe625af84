import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metacure import agents, envkit, oracle
from metacure import numkit as nk
from metacure.curiosity import (IntrinsicConfig, MetaPredictor, Predictor, TaskPredictor, exploration_reward,
                                intrinsic_reward, relabel_batch)


def _transition(rng, n=5):
    return (rng.normal(size=(n, 3)), rng.uniform(-0.1, 0.1, (n, 2)), rng.normal(size=n), rng.normal(size=(n, 3)))


def test_identical_predictors_give_zero_intrinsic_reward():
    rng = np.random.default_rng(0)
    meta = Predictor("p", 4, 3, 2, np.random.default_rng(1), (8,))
    twin = Predictor("p", 4, 3, 2, np.random.default_rng(1), (8,))
    cond = rng.normal(size=(1, 4))
    r = intrinsic_reward(meta, twin, cond, cond, _transition(rng))
    np.testing.assert_array_equal(r, np.zeros(5))


def test_scalar_transition_gives_float():
    rng = np.random.default_rng(0)
    meta = MetaPredictor(5, 3, 2, rng)
    task = TaskPredictor(2, 3, 2, rng)
    s, a, r, s2 = _transition(rng, 1)
    out = intrinsic_reward(meta, task, np.zeros(10), np.array([1.0, 0.0]), (s[0], a[0], float(r[0]), s2[0]))
    assert isinstance(out, float)


def test_prediction_error_is_squared_l2():
    rng = np.random.default_rng(2)
    p = Predictor("p", 1, 3, 2, rng, (4,))
    s, a, r, s2 = _transition(rng, 4)
    pred = p.predict(np.zeros((1, 1)), s, a)
    want = (pred[:, 0] - r) ** 2 + np.sum((pred[:, 1:] - s2) ** 2, axis=1)
    np.testing.assert_allclose(p.errors(np.zeros((1, 1)), s, a, r, s2), want)
    assert p.loss(np.zeros((1, 1)), s, a, r, s2).value[0] == pytest.approx(want.mean())


def test_predictor_rejects_bad_widths():
    rng = np.random.default_rng(0)
    p = TaskPredictor(2, 3, 2, rng)
    with pytest.raises(nk.ShapeError):
        p.errors(np.zeros((1, 3)), *_transition(rng))


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 10), st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
def test_exploration_reward_is_affine_in_extrinsic(lam, r_int, r1, r2):
    cfg = IntrinsicConfig(lam)
    assert exploration_reward(cfg, r_int, 0.0) == r_int
    slope = exploration_reward(cfg, r_int, r1) - exploration_reward(cfg, r_int, r2)
    assert slope == pytest.approx(lam * (r1 - r2), abs=1e-9)


def test_negative_lambda_rejected():
    with pytest.raises(ValueError):
        IntrinsicConfig(-0.1)


def _buffer_batch(rng, n=6):
    buf = agents.ReplayBuffer(0, 3, 2, 10, capacity=50)
    for t in range(n):
        buf.add(agents.Transition(rng.normal(size=3), rng.uniform(-.1, .1, 2), float(rng.normal()),
                                  rng.normal(size=3), False, 0, t, rng.normal(size=10), rng.normal(size=10)))
    return buf._gather(np.arange(n))


def test_relabel_uses_current_predictor_weights():
    rng = np.random.default_rng(3)
    meta = MetaPredictor(5, 3, 2, rng, (8,))
    task = TaskPredictor(2, 3, 2, rng, (8,))
    batch = _buffer_batch(rng)
    kappa = np.array([[1.0, 0.0]])
    cfg = IntrinsicConfig(0.3)
    before = relabel_batch(meta, task, batch, kappa, cfg)
    for _ in range(5):
        nk.backward(meta.loss(batch.belief, batch.s, batch.a, batch.r, batch.s2))
        nk.adam_step(meta.params, 1e-2)
    after = relabel_batch(meta, task, batch, kappa, cfg)
    assert not np.allclose(before, after)
    want = intrinsic_reward(meta, task, batch.belief, kappa, (batch.s, batch.a, batch.r, batch.s2)) + 0.3 * batch.r
    np.testing.assert_allclose(after, want)


def test_relabel_single_element_matches_pointwise():
    rng = np.random.default_rng(4)
    meta = MetaPredictor(5, 3, 2, rng, (8,))
    task = TaskPredictor(2, 3, 2, rng, (8,))
    batch = _buffer_batch(rng, 1)
    kappa = np.array([[0.0, 1.0]])
    cfg = IntrinsicConfig(0.3)
    r_int = intrinsic_reward(meta, task, batch.belief[0], kappa, (batch.s[0], batch.a[0], float(batch.r[0]), batch.s2[0]))
    np.testing.assert_allclose(relabel_batch(meta, task, batch, kappa, cfg), [exploration_reward(cfg, r_int, batch.r[0])])


def test_lambda_zero_gives_pure_intrinsic_and_disabled_gives_scaled_extrinsic():
    rng = np.random.default_rng(5)
    meta = MetaPredictor(5, 3, 2, rng, (8,))
    task = TaskPredictor(2, 3, 2, rng, (8,))
    batch = _buffer_batch(rng)
    kappa = np.array([[1.0, 0.0]])
    pure = intrinsic_reward(meta, task, batch.belief, kappa, (batch.s, batch.a, batch.r, batch.s2))
    np.testing.assert_array_equal(relabel_batch(meta, task, batch, kappa, IntrinsicConfig(0.0)), pure)
    np.testing.assert_array_equal(relabel_batch(meta, task, batch, kappa, IntrinsicConfig(0.3, use_intrinsic=False)),
                                  0.3 * batch.r)


def test_relabel_requires_belief_snapshots():
    rng = np.random.default_rng(6)
    batch = _buffer_batch(rng)
    batch.belief = None
    with pytest.raises(ValueError):
        relabel_batch(None, None, batch, None, IntrinsicConfig())


def test_exact_models_give_oracle_information_gain():
    # with exact log-likelihood "predictors", the intrinsic reward is the oracle's log-ratio
    prior = oracle.bernoulli_bandit_pair(0.8)
    meta = oracle.ExactModel(prior)
    task_model = oracle.ExactModel(prior)
    traj = (0, ((0, 1.0, 0), (0, 0.0, 0), (1, 1.0, 0)))
    trace = oracle.oracle_intrinsic_trace(prior, None, traj, 0)
    s = np.array([[1.0]])
    for t, (a, r, s2) in enumerate(traj[1]):
        post = oracle.exact_posterior(prior, (0, traj[1][:t]))
        action = np.array([[-1.0 if a == 0 else 1.0]])
        got = intrinsic_reward(meta, task_model, post[None], np.eye(2)[[0]], (s, action, np.array([r]), s))
        assert got[0] == pytest.approx(trace[t], abs=1e-12)
    assert trace[0] == pytest.approx(math.log(0.8 / 0.5))


def test_predictor_learns_deterministic_tabular_targets():
    rng = np.random.default_rng(7)
    tasks = envkit.information_bandit_set(2)
    p = TaskPredictor(2, 1, 1, rng, (16, 16))
    s = np.ones((4, 1))
    a = np.array([[-1.0], [1.0], [-1.0], [1.0]])
    kappa = np.array([[1, 0], [1, 0], [0, 1], [0, 1]], dtype=float)
    r = np.array([0.0, 0.5, 1.0, 0.5])
    for _ in range(1500):
        nk.backward(p.loss(kappa, s, a, r, s))
        nk.adam_step(p.params, 3e-3)
    assert p.errors(kappa, s, a, r, s).mean() < 1e-2
    assert len(tasks) == 2
