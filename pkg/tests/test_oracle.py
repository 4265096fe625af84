import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metacure import envkit, oracle
from metacure.oracle import TabularPolicy, TaskPrior

INFORMATIVE = TabularPolicy.constant([1.0, 0.0])
UNINFORMATIVE = TabularPolicy.constant([0.0, 1.0])
MIXED = TabularPolicy.constant([0.5, 0.5])


def test_fully_informative_arm_gives_ln2():
    mi = oracle.exact_mutual_information(oracle.deterministic_bandit_pair(), INFORMATIVE, 1)
    assert mi == pytest.approx(math.log(2), abs=1e-12)


def test_shared_arm_gives_zero_information():
    assert oracle.exact_mutual_information(oracle.deterministic_bandit_pair(), UNINFORMATIVE, 2) == pytest.approx(0, abs=1e-15)


def test_mixed_policy_gives_half_ln2():
    # trajectories: (arm0, r0 | task0) 0.25, (arm0, r1 | task1) 0.25, (arm1, 0.5) 0.5 -> 0.5 ln 2
    mi = oracle.exact_mutual_information(oracle.deterministic_bandit_pair(), MIXED, 1)
    assert mi == pytest.approx(0.5 * math.log(2), abs=1e-12)


def test_posterior_examples():
    prior = oracle.deterministic_bandit_pair()
    np.testing.assert_array_equal(oracle.exact_posterior(prior, (0, ())), [0.5, 0.5])
    np.testing.assert_array_equal(oracle.exact_posterior(prior, [(0, 0, 1.0, 0)]), [0.0, 1.0])
    bern = oracle.bernoulli_bandit_pair(0.8)
    np.testing.assert_allclose(oracle.exact_posterior(bern, [(0, 0, 1.0, 0)]), [0.8, 0.2], rtol=1e-12)


def test_zero_probability_context_rejected():
    prior = oracle.deterministic_bandit_pair()
    with pytest.raises(oracle.ZeroProbabilityError):
        oracle.exact_posterior(prior, [(0, 0, 0.5, 0)])
    with pytest.raises(oracle.ZeroProbabilityError):
        oracle.oracle_intrinsic_trace(prior, None, (0, ((0, 1.0, 0),)), 0)


def test_pred_prob_examples():
    prior = oracle.deterministic_bandit_pair()
    assert oracle.exact_pred_prob(prior, (0, ()), 0, 0) == {(0.0, 0): 0.5, (1.0, 0): 0.5}
    single = TaskPrior.uniform(envkit.random_tabular_family(np.random.default_rng(0), 1, 2, 2))
    for s in range(2):
        for a in range(2):
            got = oracle.exact_pred_prob(single, [], s, a)
            want = envkit.exact_model(single.tasks[0], s, a)
            assert got.keys() == want.keys()
            for k in got:
                assert got[k] == pytest.approx(want[k], abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_pred_prob_is_normalised(seed):
    inst = oracle.random_instance(np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    dist = oracle.enumerate_trajectories(inst.prior, inst.policy, inst.H)
    traj, _, _ = dist.entries[int(rng.integers(len(dist.entries)))]
    s0, steps = traj
    prefix = (s0, steps[:-1])
    s = s0 if len(steps) == 1 else steps[-2][2]
    total = sum(oracle.exact_pred_prob(inst.prior, prefix, s, steps[-1][0]).values())
    assert total == pytest.approx(1.0, abs=1e-12)


def test_single_task_trace_is_zero():
    task = envkit.random_tabular_family(np.random.default_rng(1), 1, 2, 2)[0]
    prior = TaskPrior.uniform([task])
    dist = oracle.enumerate_trajectories(prior, MIXED, 3)
    for traj, k, _ in dist.entries[:20]:
        assert oracle.oracle_intrinsic_trace(prior, MIXED, traj, k) == pytest.approx([0.0] * 3, abs=1e-15)


def test_deterministic_bandit_trace_collapses_after_first_step():
    prior = oracle.deterministic_bandit_pair()
    trace = oracle.oracle_intrinsic_trace(prior, INFORMATIVE, (0, ((0, 1.0, 0), (0, 1.0, 0), (1, 0.5, 0))), 1)
    assert trace == pytest.approx([math.log(2), 0.0, 0.0], abs=1e-15)


def test_trajectory_distribution_is_normalised():
    for inst in oracle.random_instances(20, 3):
        dist = oracle.enumerate_trajectories(inst.prior, inst.policy, inst.H)
        assert dist.total() + dist.dropped_mass == pytest.approx(1.0, abs=1e-9)
        assert all(p >= 0 for _, _, p in dist.entries)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_mutual_information_bounds(seed):
    inst = oracle.random_instance(np.random.default_rng(seed))
    mi = oracle.exact_mutual_information(inst.prior, inst.policy, inst.H)
    assert -1e-12 <= mi <= math.log(len(inst.prior.tasks)) + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_policy_factors_cancel(seed):
    inst = oracle.random_instance(np.random.default_rng(seed))
    a = oracle.exact_mutual_information(inst.prior, inst.policy, inst.H, include_policy=True)
    b = oracle.exact_mutual_information(inst.prior, inst.policy, inst.H, include_policy=False)
    assert a == pytest.approx(b, abs=1e-12)


def test_shared_initial_state_has_zero_constant():
    prior = oracle.bernoulli_bandit_pair(0.7)
    assert oracle.initial_state_const(prior) == 0.0
    dec = oracle.verify_decomposition(prior, MIXED, 3)
    assert dec.const == 0.0 and dec.diff < 1e-12


def test_telescoping_for_informative_policy():
    prior = oracle.deterministic_bandit_pair()
    dec = oracle.verify_decomposition(prior, INFORMATIVE, 3)
    assert dec.log_ratio_sum == pytest.approx(math.log(2), abs=1e-12)
    assert dec.lhs == pytest.approx(dec.log_ratio_sum, abs=1e-12)


def test_task_dependent_initial_states_need_constant():
    rng = np.random.default_rng(11)
    tasks = envkit.random_tabular_family(rng, 2, 2, 2, task_dependent_init=True)
    prior = TaskPrior.uniform(tasks)
    dec = oracle.verify_decomposition(prior, TabularPolicy.random_history(2, rng), 2)
    assert abs(dec.const) > 1e-3
    assert dec.diff < 1e-9
    assert abs(dec.lhs - dec.log_ratio_sum) > 1e-3


def test_decomposition_on_hundred_random_instances():
    worst = max(oracle.verify_decomposition(i.prior, i.policy, i.H).diff for i in oracle.random_instances(100, 0))
    assert worst < 1e-9


def test_constant_offset_breaks_the_identity():
    inst = oracle.random_instances(1, 0)[0]
    assert oracle.verify_decomposition(inst.prior, inst.policy, inst.H, const_offset=1e-6).diff > 1e-9


def test_prior_validation():
    tasks = envkit.information_bandit_set(2)
    with pytest.raises(ValueError):
        TaskPrior(tasks, [0.7, 0.7])
    with pytest.raises(ValueError):
        TaskPrior(tasks, [1.0])


def test_enumeration_budget():
    prior = oracle.deterministic_bandit_pair()
    with pytest.raises(oracle.EnumerationBudgetError):
        oracle.enumerate_trajectories(prior, MIXED, 3, budget=4)
    with pytest.raises(ValueError):
        oracle.enumerate_trajectories(prior, MIXED, 0)


def test_random_history_policy_is_memoised_distribution():
    pol = TabularPolicy.random_history(3, np.random.default_rng(0))
    p = pol.probs(0, ((1, 0.0, 0),), 0)
    np.testing.assert_array_equal(p, pol.probs(0, ((1, 0.0, 0),), 0))
    assert p.sum() == pytest.approx(1.0) and np.all(p > 0)


def test_instance_description_mentions_sizes():
    inst = oracle.random_instances(1, 5)[0]
    text = inst.describe()
    assert f"H={inst.H}" in text and "prior" in text
