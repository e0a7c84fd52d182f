import dataclasses

import numpy as np
import pytest

from edgealloc.sacgcn import (Batch, ReplayBuffer, SacController, SacHyper, SacLearner, Transition,
                              evaluate, learner_from_checkpoint, train)
from edgealloc.simenv import EnvConfig, normalize_obs, reset
from edgealloc.tensornet import grad_check, load_checkpoint, save_checkpoint

CFG = EnvConfig()
SMALL = SacHyper(hidden=16, batch=8, buffer_size=64)


def make_batch(rng, B=8, n=3):
    nb = np.tile(np.array([[1, 2], [0, 2], [0, 1]]), (B, 1, 1))
    return Batch(rng.normal(size=(B, n, 10)), rng.uniform(-0.9, 0.9, (B, n, 2)),
                 rng.normal(size=B), rng.normal(size=(B, n, 10)), nb, nb.copy(), np.zeros(B, bool))


def learner(hyper=SMALL, seed=0, kind="graph"):
    return SacLearner(CFG, hyper, seed, kind)


# --- acting ---------------------------------------------------------------------

def test_exploit_deterministic_and_explore_reproducible():
    L = learner()
    obs = normalize_obs(reset(CFG, 1)[1], CFG)
    assert np.array_equal(L.act_all(obs, "exploit"), L.act_all(obs, "exploit"))
    a = L.act_all(obs, "explore", np.random.default_rng(5))
    b = L.act_all(obs, "explore", np.random.default_rng(5))
    assert np.array_equal(a, b)
    bit, cap = L.physical(a)
    assert np.all((5 <= bit) & (bit <= 100)) and np.all((0.05 <= cap) & (cap <= 0.95))


# --- replay -----------------------------------------------------------------------

def test_replay_fifo_eviction_with_sentinels():
    buf = ReplayBuffer(5000, 3, 2)
    z = np.zeros((3, 10))
    nb = np.zeros((3, 2), int)
    for t in range(5003):
        buf.add(Transition(z, np.zeros((3, 2)), float(t), z, nb, nb))
    assert len(buf) == 5000
    r = buf.ordered_rewards()
    assert r[0] == 3.0 and r[-1] == 5002.0
    assert not np.isin([0.0, 1.0, 2.0], r).any()


def test_replay_refuses_undersized_sample():
    buf = ReplayBuffer(10, 3, 2)
    with pytest.raises(ValueError):
        buf.sample(4, np.random.default_rng(0))


# --- critic target --------------------------------------------------------------------

def test_gamma_zero_target_is_reward():
    rng = np.random.default_rng(0)
    L = learner(dataclasses.replace(SMALL, gamma=0.0))
    b = make_batch(rng)
    assert np.array_equal(L.critic_target(0, b, rng.normal(size=(8, 3, 2))), b.reward)


def test_target_label_swap_invariant():
    rng = np.random.default_rng(1)
    L = learner()
    b = make_batch(rng)
    noise = rng.normal(size=(8, 3, 2))
    y = L.critic_target(1, b, noise)
    ag = L.agents[1]
    ag.q1_targ.params, ag.q2_targ.params = ag.q2_targ.params, ag.q1_targ.params
    assert np.array_equal(L.critic_target(1, b, noise), y)


def test_target_matches_hand_evaluation():
    rng = np.random.default_rng(2)
    L = learner()
    b = make_batch(rng, B=1)
    noise = rng.normal(size=(1, 3, 2))
    ag, hp = L.agents[0], L.hyper
    acts, logps = [], []
    for j in range(3):
        out = L.agents[j].actor(b.next_state[0, j])
        mu, ls = out[:2], np.clip(out[2:], -20, 2)
        u = mu + np.exp(ls) * noise[0, j]
        acts.append(np.tanh(u))
        logn = -0.5 * ((u - mu) / np.exp(ls)) ** 2 - ls - 0.5 * np.log(2 * np.pi)
        logps.append(float(np.sum(logn - np.log(1 - np.tanh(u) ** 2 + 1e-6))))
    x, _ = ag.cin_targ.forward(b.next_state, np.array(acts)[None], b.next_neighbors)
    q = min(float(ag.q1_targ(x)[0, 0]), float(ag.q2_targ(x)[0, 0]))
    expect = b.reward[0] + hp.gamma * (q - hp.alpha * logps[0])
    assert L.critic_target(0, b, noise)[0] == pytest.approx(expect, abs=1e-10)


def test_truncation_still_bootstraps():
    rng = np.random.default_rng(3)
    L = learner()
    b = make_batch(rng)
    noise = rng.normal(size=(8, 3, 2))
    y = L.critic_target(0, b, noise)
    b.truncated[:] = True
    assert np.array_equal(L.critic_target(0, b, noise), y)


# --- critic update ------------------------------------------------------------------------

def test_critic_loss_nonnegative_and_zero_grad_at_fit():
    rng = np.random.default_rng(4)
    L = learner()
    b = make_batch(rng)
    ag = L.agents[0]
    for p in ag.q2.params:
        p[...] = 0
    for dst, src in zip(ag.q2.params, ag.q1.params):
        dst[...] = src
    x, _ = ag.cin.forward(b.state, b.action, b.neighbors)
    fit = ag.q1(x)[:, 0]
    loss, grads = L.critic_loss_grads(0, b, fit)
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads)
    loss, _ = L.critic_loss_grads(0, b, fit + 1)
    assert loss > 0


def test_critic_grads_finite_difference_and_no_target_leakage():
    rng = np.random.default_rng(5)
    L = learner()
    b = make_batch(rng)
    ag = L.agents[2]
    y = L.critic_target(2, b, rng.normal(size=(8, 3, 2)))
    _, grads = L.critic_loss_grads(2, b, y)
    online = [p for m in ag.cin.modules + [ag.q1, ag.q2] for p in m.params]
    rep = grad_check(lambda: L.critic_loss_grads(2, b, y)[0], online, grads, max_coords=15, rng=rng)
    assert rep.passed, rep.line()
    before = L.critic_target(2, b, np.zeros((8, 3, 2)))
    ag.q1_targ.params[-1] += 1.0
    ag.q2_targ.params[-1] += 1.0
    after = L.critic_target(2, b, np.zeros((8, 3, 2)))
    assert not np.array_equal(before, after)
    _, grads2 = L.critic_loss_grads(2, b, y)
    assert all(np.array_equal(g, h) for g, h in zip(grads, grads2))


# --- policy update ----------------------------------------------------------------------------

def test_policy_grads_finite_difference():
    rng = np.random.default_rng(6)
    L = learner()
    b = make_batch(rng)
    noise = rng.normal(size=(8, 3, 2))
    _, grads, _ = L.policy_loss_grads(1, b, noise)
    rep = grad_check(lambda: L.policy_loss_grads(1, b, noise)[0], L.agents[1].actor.params, grads,
                     max_coords=20, rng=rng)
    assert rep.passed, rep.line()


def test_policy_gradient_only_into_own_actor():
    rng = np.random.default_rng(7)
    L = learner()
    b = make_batch(rng)
    snap = [[p.copy() for p in ag.actor.params] for ag in L.agents]
    crit = [p.copy() for m in L.agents[0].cin.modules + [L.agents[0].q1] for p in m.params]
    L.update_policy(0, b, rng.normal(size=(8, 3, 2)))
    assert any(not np.array_equal(p, q) for p, q in zip(L.agents[0].actor.params, snap[0]))
    for j in (1, 2):
        assert all(np.array_equal(p, q) for p, q in zip(L.agents[j].actor.params, snap[j]))
    assert all(np.array_equal(p, q) for p, q in
               zip([p for m in L.agents[0].cin.modules + [L.agents[0].q1] for p in m.params], crit))


def test_alpha_zero_is_pure_q_ascent():
    rng = np.random.default_rng(8)
    L = learner(dataclasses.replace(SMALL, alpha=0.0))
    b = make_batch(rng)
    noise = rng.normal(size=(8, 3, 2))
    loss, _, _ = L.policy_loss_grads(0, b, noise)
    acts, _, _ = L.sample_joint(b.state, noise)
    x, _ = L.agents[0].cin.forward(b.state, acts, b.neighbors)
    qmin = np.minimum(L.agents[0].q1(x)[:, 0], L.agents[0].q2(x)[:, 0])
    assert loss == pytest.approx(-qmin.mean(), abs=1e-12)


def test_small_policy_step_improves_objective():
    rng = np.random.default_rng(9)
    L = learner(dataclasses.replace(SMALL, lr_pi=1e-5))
    b = make_batch(rng)
    noise = rng.normal(size=(8, 3, 2))
    before, _, _ = L.policy_loss_grads(0, b, noise)
    L.update_policy(0, b, noise)
    after, _, _ = L.policy_loss_grads(0, b, noise)
    assert after < before


def test_entropy_higher_for_spread_policy():
    rng = np.random.default_rng(10)
    L = learner()
    obs = rng.normal(size=(256, 10))
    actor = L.agents[0].actor
    noise = rng.normal(size=(256, 2))
    from edgealloc.tensornet import GaussianHead, squashed_sample

    def entropy(log_sigma):
        out = actor(obs).copy()
        out[:, 2:] = log_sigma
        _, lp, _ = squashed_sample(GaussianHead.from_output(out), noise)
        return -lp.mean()

    assert entropy(0.0) > entropy(-5.0)


# --- soft update ------------------------------------------------------------------------------

def test_soft_update_recurrence_exact():
    rng = np.random.default_rng(11)
    L = learner()
    ag = L.agents[0]
    for p in ag.q1.params:
        p += rng.normal(size=p.shape)
    before = [t.params[k].copy() for t, _ in ag.target_pairs() for k in range(len(t.params))]
    L.soft_update(0)
    online = [p for _, o in ag.target_pairs() for p in o.params]
    after = [p for t, _ in ag.target_pairs() for p in t.params]
    tau = L.hyper.tau
    for t0, p, t1 in zip(before, online, after):
        assert np.array_equal(t1, tau * p + (1.0 - tau) * t0)


def test_targets_start_as_exact_copies():
    for t, o in learner().agents[0].target_pairs():
        assert all(np.array_equal(a, b) for a, b in zip(t.params, o.params))


# --- training / evaluation --------------------------------------------------------------------

def test_zero_episodes_is_noop():
    L = learner()
    chk = L.param_checksum()
    res = train(CFG, SMALL, 0, 0, learner=L)
    assert res.log == [] and L.param_checksum() == chk


def test_train_deterministic_and_evaluate_pure(tmp_path):
    a = train(CFG, SMALL, 2, 3)
    b = train(CFG, SMALL, 2, 3)
    assert [r.as_dict() for r in a.log] == [r.as_dict() for r in b.log]
    assert a.learner.param_checksum() == b.learner.param_checksum()
    chk = a.learner.param_checksum()
    e1 = evaluate(a.learner, CFG, 2, 0)
    e2 = evaluate(a.learner, CFG, 2, 0)
    assert e1 == e2 and len(e1[0]) == 40
    assert a.learner.param_checksum() == chk


def test_checkpoint_roundtrip_restores_policy(tmp_path):
    res = train(CFG, SMALL, 2, 4)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, res.learner.state_entries(), {"critic_input": "graph"})
    meta, arrays = load_checkpoint(path)
    L2 = learner_from_checkpoint(arrays, meta, CFG, SMALL)
    assert L2.param_checksum() == res.learner.param_checksum()
    assert L2.agents[0].q_opt.state.step == res.learner.agents[0].q_opt.state.step
    obs = normalize_obs(reset(CFG, 0)[1], CFG)
    assert np.array_equal(L2.act_all(obs, "exploit"), res.learner.act_all(obs, "exploit"))


def test_controller_uses_local_observations_only():
    L = learner()
    env, obs = reset(CFG, 0)
    ctrl = SacController(L)
    bit, cap = ctrl.actions(obs, CFG)
    z = normalize_obs(obs, CFG)
    for i in range(3):
        raw = L.act(i, z[i], "exploit")
        assert L.physical(raw[None])[0][0] == bit[i]


def test_isac_critic_width():
    L = learner(kind="local")
    assert L.agents[0].cin.out_dim == 12
    assert L.agents[0].q1.layer_dims[0] == 12
    assert learner().agents[0].q1.layer_dims[0] == 128 + 6


def test_hyper_validation():
    assert SacHyper().violations() == []
    assert any("gamma" in e for e in SacHyper(gamma=1.5).violations())
