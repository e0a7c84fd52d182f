"""Finite-difference gradient suite over every trainable block of SAC-GCN.

Each target is checked on ``draws`` independent random parameter/input
draws; per draw a random subset of coordinates of every array is probed.
Probes that flip a ReLU or clip region are skipped.
"""
from __future__ import annotations

import numpy as np

from .graphattn import N_HEADS
from .sacgcn import SacAgent, SacHyper
from .simenv import ACT_DIM, OBS_DIM
from .tensornet import GaussianHead, GradCheckReport, grad_check, squashed_backward, squashed_sample

N_AGENTS = 3
BATCH = 6


def _relu_signature(*caches) -> bytes:
    return b"".join(np.packbits(p > 0).tobytes() for c in caches for p in c.pre[:-1])


def _draw(seed: int, draw: int):
    rng = np.random.default_rng(np.random.SeedSequence([seed, draw]))
    agent = SacAgent(0, N_AGENTS, SacHyper(), rng)
    obs = rng.normal(size=(BATCH, N_AGENTS, OBS_DIM))
    act = rng.uniform(-0.95, 0.95, size=(BATCH, N_AGENTS, ACT_DIM))
    nbrs = np.tile(np.array([[1, 2], [0, 2], [0, 1]]), (BATCH, 1, 1))
    return rng, agent, obs, act, nbrs


def _actor_check(agent, obs, rng, **kw):
    x = np.ascontiguousarray(obs[:, 0])
    noise = rng.standard_normal((BATCH, ACT_DIM))
    wa = rng.normal(size=(BATCH, ACT_DIM))
    wl = rng.normal(size=BATCH)

    def run():
        out, cache = agent.actor.forward(x)
        head = GaussianHead.from_output(out)
        a, lp, sc = squashed_sample(head, noise)
        return float((a * wa).sum() + (lp * wl).sum()), cache, sc

    _, cache, sc = run()
    grads, gx = agent.actor.backward(cache, squashed_backward(sc, wa, wl))

    def kink():
        _, c, s = run()
        clip = (s.head.raw_log_sigma >= -20.0) & (s.head.raw_log_sigma <= 2.0)
        return _relu_signature(c) + np.packbits(clip).tobytes()

    return grad_check(lambda: run()[0], agent.actor.params + [x], grads + [gx], kink=kink, rng=rng, **kw)


def _critic_run(agent, q, obs, act, nbrs, w):
    x, ccache = agent.cin.forward(obs, act, nbrs)
    out, qcache = q.forward(x)
    return float((out[:, 0] * w).sum()), ccache, qcache


def _critic_grads(agent, q, obs, act, nbrs, w):
    _, ccache, qcache = _critic_run(agent, q, obs, act, nbrs, w)
    qgrads, dx = q.backward(qcache, w[:, None])
    tgrads, d_obs, d_act = agent.cin.trunk.backward(ccache, dx[:, :agent.cin.h_dim])
    d_act = d_act + dx[:, agent.cin.h_dim:].reshape(d_act.shape)
    return qgrads, tgrads, d_obs, d_act


def _critic_kink(agent, q, obs, act, nbrs, w):
    def kink():
        _, ccache, qcache = _critic_run(agent, q, obs, act, nbrs, w)
        return _relu_signature(qcache, ccache.enc_cache)
    return kink


def _critic_check(agent, q, obs, act, nbrs, rng, **kw):
    w = rng.normal(size=BATCH)
    qgrads, tgrads, d_obs, d_act = _critic_grads(agent, q, obs, act, nbrs, w)
    tparams = [p for m in agent.cin.modules for p in m.params]
    return grad_check(lambda: _critic_run(agent, q, obs, act, nbrs, w)[0],
                      q.params + tparams + [obs, act], qgrads + tgrads + [d_obs, d_act],
                      kink=_critic_kink(agent, q, obs, act, nbrs, w), rng=rng, **kw)


def _encoder_check(agent, obs, act, nbrs, rng, **kw):
    w = rng.normal(size=BATCH)
    q = agent.q1
    _, tgrads, _, _ = _critic_grads(agent, q, obs, act, nbrs, w)
    enc = agent.cin.trunk.encoder
    n = len(enc.params)
    return grad_check(lambda: _critic_run(agent, q, obs, act, nbrs, w)[0], enc.params, tgrads[:n],
                      kink=_critic_kink(agent, q, obs, act, nbrs, w), rng=rng, **kw)


def _head_check(agent, head, obs, act, nbrs, rng, **kw):
    w = rng.normal(size=BATCH)
    q = agent.q1
    _, tgrads, _, _ = _critic_grads(agent, q, obs, act, nbrs, w)
    heads = agent.cin.trunk.heads
    n_enc = len(agent.cin.trunk.encoder.params)
    hgrads = tgrads[n_enc:]
    cand = []
    for p in heads.params:
        mask = np.zeros(p.shape, dtype=bool)
        mask[:, head, :] = True
        cand.append(np.flatnonzero(mask))
    return grad_check(lambda: _critic_run(agent, q, obs, act, nbrs, w)[0], heads.params, hgrads,
                      kink=_critic_kink(agent, q, obs, act, nbrs, w), candidates=cand, rng=rng, **kw)


def _merge(name: str, reports: list[GradCheckReport], tolerance: float) -> GradCheckReport:
    worst = max(reports, key=lambda r: r.max_rel_error)
    return GradCheckReport(name, worst.max_rel_error, sum(r.n_checked for r in reports),
                           tolerance, worst.worst)


def target_names() -> list[str]:
    return ["actor", "q1", "q2", "encoder"] + [f"head{h}" for h in range(N_HEADS)]


def run_suite(draws: int = 20, seed: int = 0, coords: int = 6, tolerance: float = 1e-3,
              h: float = 1e-5, floor: float = 1e-6) -> list[GradCheckReport]:
    """One merged report per target (actor, q1, q2, encoder, head0..head3)."""
    per = {name: [] for name in target_names()}
    for d in range(draws):
        rng, agent, obs, act, nbrs = _draw(seed, d)
        kw = dict(tolerance=tolerance, h=h, floor=floor, max_coords=coords)
        per["actor"].append(_actor_check(agent, obs, rng, **kw))
        per["q1"].append(_critic_check(agent, agent.q1, obs, act, nbrs, rng, **kw))
        per["q2"].append(_critic_check(agent, agent.q2, obs, act, nbrs, rng, **kw))
        per["encoder"].append(_encoder_check(agent, obs, act, nbrs, rng, **kw))
        for k in range(N_HEADS):
            per[f"head{k}"].append(_head_check(agent, k, obs, act, nbrs, rng, **kw))
    return [_merge(name, reps, tolerance) for name, reps in per.items()]
