import numpy as np
import pytest

from metacure import agents, inference
from metacure import numkit as nk


def _tr(rng, t=0, source=agents.EXPLORE, episode=0):
    return agents.Transition(rng.normal(size=3), rng.uniform(-.1, .1, 2), float(rng.normal()), rng.normal(size=3),
                             False, episode, t, rng.normal(size=10), rng.normal(size=10), source)


def _batch(rng, n=16, belief=True):
    buf = agents.ReplayBuffer(0, 3, 2, 10, capacity=n)
    for t in range(n):
        buf.add(_tr(rng, t))
    return buf._gather(np.arange(n))


def test_singleton_buffer_batch_is_that_transition():
    rng = np.random.default_rng(0)
    buf = agents.ReplayBuffer(3, 3, 2, 10)
    tr = _tr(rng)
    buf.add(tr)
    b = buf.sample_batch(rng, 1)
    np.testing.assert_array_equal(b.s[0], tr.s)
    np.testing.assert_array_equal(b.belief_next[0], tr.belief_next)
    assert b.task_id == 3


def test_empty_buffer_raises():
    buf = agents.ReplayBuffer(0, 3, 2, 10)
    with pytest.raises(ValueError):
        buf.sample_batch(np.random.default_rng(0), 4)
    with pytest.raises(ValueError):
        buf.sample_context(np.random.default_rng(0), 4)


def test_buffer_is_fifo_at_capacity():
    rng = np.random.default_rng(1)
    buf = agents.ReplayBuffer(0, 3, 2, 10, capacity=5)
    trs = [_tr(rng, t) for t in range(8)]
    for tr in trs:
        buf.add(tr)
    assert len(buf) == 5
    stored = {tuple(x) for x in buf.s}
    assert stored == {tuple(t.s) for t in trs[3:]}


def test_context_is_ordered_prefix_of_exploration_segment():
    rng = np.random.default_rng(2)
    buf = agents.ReplayBuffer(0, 3, 2, 10)
    run = [_tr(rng, t, agents.EXPLORE) for t in range(6)] + [_tr(rng, t, agents.EXPLOIT) for t in range(3)]
    buf.add_run(run)
    for _ in range(50):
        ctx = buf.sample_context(rng, 100)
        assert 1 <= len(ctx) <= 6
        for i, row in enumerate(ctx):
            np.testing.assert_array_equal(row, run[i].vector())


def test_context_length_respects_cap():
    rng = np.random.default_rng(3)
    buf = agents.ReplayBuffer(0, 3, 2, 10)
    buf.add_run([_tr(rng, t) for t in range(20)])
    assert max(len(buf.sample_context(rng, 4)) for _ in range(100)) == 4


def test_zero_weight_policy_deterministic_action_is_zero():
    rng = np.random.default_rng(0)
    pol = agents.PolicyNet("p", 3, 5, 2, 0.1, rng, (8, 8))
    for e in pol.params.entries.values():
        e.value[...] = 0.0
    np.testing.assert_array_equal(agents.act(pol, np.ones(3), np.ones(5), rng, deterministic=True), [0.0, 0.0])


def test_sampled_actions_lie_in_action_box():
    rng = np.random.default_rng(1)
    pol = agents.PolicyNet("p", 3, 5, 2, 0.1, rng, (8, 8))
    for e in pol.params.entries.values():
        e.value *= 10.0
    a, logp = pol.sample(rng.normal(size=(500, 3)), rng.normal(size=(500, 5)), rng)
    assert np.all(np.abs(a) <= 0.1)
    assert np.all(np.isfinite(logp))


def test_policy_sampling_is_reproducible():
    pol = agents.PolicyNet("p", 3, 5, 2, 0.1, np.random.default_rng(0), (8,))
    a = [agents.act(pol, np.ones(3), np.zeros(5), np.random.default_rng(9)) for _ in range(2)]
    np.testing.assert_array_equal(a[0], a[1])


def test_graph_and_plain_policy_samples_agree():
    rng = np.random.default_rng(2)
    pol = agents.PolicyNet("p", 3, 5, 2, 0.1, rng, (8,))
    s, c, noise = rng.normal(size=(4, 3)), rng.normal(size=(4, 5)), rng.normal(size=(4, 2))
    a, logp = pol.sample(s, c, rng, noise=noise)
    ag, lg = pol.sample_graph(s, c, noise)
    np.testing.assert_allclose(ag.value, a, rtol=1e-12)
    np.testing.assert_allclose(lg.value[:, 0], logp, rtol=1e-10)


def test_squashed_log_prob_integrates_to_one():
    # 1-D tanh-Gaussian with bound b: the density over [-b, b] must integrate to 1
    rng = np.random.default_rng(3)
    pol = agents.PolicyNet("p", 1, 1, 1, 0.1, rng, (4,))
    u = np.linspace(-8, 8, 200001)
    mean, log_std = pol.mean_log_std(np.zeros((1, 1)), np.zeros((1, 1)))
    eps = (u - mean[0, 0]) / np.exp(log_std[0, 0])
    _, logp = pol.sample(np.zeros((len(u), 1)), np.zeros((len(u), 1)), rng, noise=eps[:, None])
    a = 0.1 * np.tanh(u)
    assert np.trapezoid(np.exp(logp), a) == pytest.approx(1.0, abs=1e-4)


def test_policy_conditioning_width_checked():
    pol = agents.PolicyNet("p", 3, 5, 2, 0.1, np.random.default_rng(0), (8,))
    with pytest.raises(nk.ShapeError):
        agents.act(pol, np.ones(3), np.ones(4), np.random.default_rng(0))


def test_polyak_update_interpolates_and_validates():
    a, b = nk.ParamStore(), nk.ParamStore()
    a.add("w", np.zeros(2))
    b.add("w", np.ones(2))
    agents.polyak_update(a, b, 0.25)
    np.testing.assert_allclose(a["w"], [0.25, 0.25])
    with pytest.raises(ValueError):
        agents.polyak_update(a, b, 0.0)


def _exploiter(rng, hidden=(16, 16)):
    enc = inference.Encoder(9, rng, 5, hidden)
    pol = agents.PolicyNet("exploiter", 3, 5, 2, 0.1, rng, hidden)
    qf = agents.QNet("q_exploiter", 3, 2, 5, rng, True, hidden)
    return enc, pol, qf


def test_exploiter_losses_finite_at_init_and_task_ids_checked():
    rng = np.random.default_rng(4)
    enc, pol, qf = _exploiter(rng)
    batch = _batch(rng)
    ctx = rng.normal(size=(5, 9))
    out = agents.exploiter_losses(pol, qf, enc, batch, ctx, agents.SacConfig(), rng)
    assert all(np.isfinite(out[k].value[0]) for k in ("critic", "actor", "td", "kl"))
    with pytest.raises(ValueError):
        agents.exploiter_losses(pol, qf, enc, batch, ctx, agents.SacConfig(), rng, context_task_id=1)
    with pytest.raises(ValueError):
        agents.exploiter_losses(pol, qf, enc, batch, ctx[:0], agents.SacConfig(), rng)


def test_q_converges_to_reward_with_zero_discount():
    rng = np.random.default_rng(5)
    enc, pol, qf = _exploiter(rng, (32, 32))
    batch = _batch(rng, 16)
    batch.r = np.tanh(batch.s[:, 0])
    ctx = rng.normal(size=(4, 9))
    cfg = agents.SacConfig(gamma=0.0, lr=3e-3, beta=0.0)
    for _ in range(1500):
        agents.sac_update_exploiter(pol, qf, enc, batch, ctx, cfg, rng)
    mean, var = enc.infer(ctx)
    z = inference.sample_z(mean.value, var.value, rng)
    for q in qf.values(batch.s, batch.a, z):
        assert np.max(np.abs(q - batch.r)) < 0.05


def test_explorer_q_goes_to_zero_for_zero_reward():
    rng = np.random.default_rng(6)
    pol = agents.PolicyNet("explorer", 3, 10, 2, 0.1, rng, (16, 16))
    qf = agents.QNet("q_explorer", 3, 2, 10, rng, True, (16, 16))
    batch = _batch(rng, 16)
    cfg = agents.SacConfig(gamma=0.5, alpha=0.0, tau=0.2, lr=3e-3)
    for _ in range(2000):
        agents.sac_update_explorer(pol, qf, batch, np.zeros(16), cfg, rng)
    for q in qf.values(batch.s, batch.a, batch.belief):
        assert np.max(np.abs(q)) < 0.05


def test_explorer_requires_snapshots():
    rng = np.random.default_rng(7)
    pol = agents.PolicyNet("explorer", 3, 10, 2, 0.1, rng, (8,))
    qf = agents.QNet("q_explorer", 3, 2, 10, rng, True, (8,))
    batch = _batch(rng)
    batch.belief_next = None
    with pytest.raises(ValueError):
        agents.explorer_losses(pol, qf, batch, np.zeros(len(batch)), agents.SacConfig(), rng)


def test_policy_gradient_ignores_encoder_when_z_fixed():
    rng = np.random.default_rng(8)
    enc, pol, qf = _exploiter(rng, (8,))
    batch = _batch(rng, 8)
    z_bar = rng.normal(size=(1, 5))
    noise = rng.normal(size=(8, 2))

    def grads():
        pol.params.zero_grad()
        nk.backward(agents.policy_loss_graph(pol, qf, batch.s, z_bar, 0.1, noise))
        return {n: pol.params.entries[n].grad.copy() for n in pol.params.names()}

    before = grads()
    for e in enc.params.entries.values():
        e.value += rng.normal(size=e.value.shape)
    after = grads()
    for n in before:
        np.testing.assert_array_equal(before[n], after[n])
    assert all(not np.any(e.grad) for e in qf.params.entries.values())


def test_actor_step_leaves_critic_untouched():
    rng = np.random.default_rng(9)
    enc, pol, qf = _exploiter(rng, (8,))
    batch = _batch(rng, 8)
    losses = agents.exploiter_losses(pol, qf, enc, batch, rng.normal(size=(3, 9)), agents.SacConfig(), rng)
    nk.backward(losses["actor"])
    assert all(not np.any(e.grad) for e in qf.params.entries.values())
    assert all(not np.any(e.grad) for e in enc.params.entries.values())
    assert any(np.any(e.grad) for e in pol.params.entries.values())


def test_entropy_keeps_log_std_above_floor_on_flat_q():
    rng = np.random.default_rng(10)
    pol = agents.PolicyNet("explorer", 3, 10, 2, 0.1, rng, (16, 16))
    qf = agents.QNet("q_explorer", 3, 2, 10, rng, True, (16, 16))
    for e in qf.params.entries.values():
        e.value[...] = 0.0
    batch = _batch(rng, 32)
    cfg = agents.SacConfig(alpha=0.1, lr=3e-3)
    for _ in range(500):
        nk.backward(agents.policy_loss_graph(pol, qf, batch.s, batch.belief, cfg.alpha,
                                             rng.normal(size=(32, 2))))
        nk.adam_step(pol.params, cfg.lr)
    _, log_std = pol.mean_log_std(batch.s, batch.belief)
    assert np.all(log_std > agents.LOG_STD_MIN + 1.0)


def test_twin_switch_controls_head_count():
    rng = np.random.default_rng(11)
    assert len(agents.QNet("q", 3, 2, 5, rng, twin=True).specs) == 2
    assert len(agents.QNet("q", 3, 2, 5, rng, twin=False).specs) == 1
