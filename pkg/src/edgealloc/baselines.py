"""Comparison controllers: ISAC, DQN, GCC-like, BBR-like, uniform and random.

Every controller exposes ``begin_episode(config, rng)`` and
``actions(obs, config) -> (bitrates, cpu_caps)`` on raw (unnormalized)
observations, so one rollout loop evaluates them all.
"""
from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from .qoe import QoeWeights, RewardWeights, step_metrics
from .sacgcn import (EpisodeRecord, ReplayBuffer, SacHyper, SacLearner, TrainResult,
                     Transition, episode_seed, train as sac_train)
from .simenv import OBS_DIM, EnvConfig, MetaverseEnv, normalize_obs
from .tensornet import Adam, Mlp


# ---------------------------------------------------------------------------
# ISAC


def isac_learner(env_config: EnvConfig, hyper: SacHyper, seed: int = 0) -> SacLearner:
    return SacLearner(env_config, hyper, seed, critic_input="local")


def isac_train(env_config: EnvConfig, hyper: SacHyper, episodes: int, seed: int,
               qoe_w=None, reward_w=None, progress=None) -> TrainResult:
    return sac_train(env_config, hyper, episodes, seed, qoe_w, reward_w,
                     critic_input="local", progress=progress)


def isac_act(learner: SacLearner, obs_norm: np.ndarray, mode: str = "exploit", rng=None):
    return learner.act_all(obs_norm, mode, rng)


# ---------------------------------------------------------------------------
# DQN


GRID_LEVELS = 5


@dataclass
class DqnSettings:
    levels: int = GRID_LEVELS
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.5
    target_period: int = 200

    def violations(self) -> list[str]:
        errs = []
        if self.levels < 2:
            errs.append(f"levels must be >= 2 (got {self.levels})")
        if not 0 <= self.eps_end <= self.eps_start <= 1:
            errs.append("need 0 <= eps_end <= eps_start <= 1")
        if not 0 < self.eps_fraction <= 1:
            errs.append(f"eps_fraction must be in (0, 1] (got {self.eps_fraction})")
        if self.target_period < 1:
            errs.append(f"target_period must be >= 1 (got {self.target_period})")
        return errs

    def to_dict(self):
        return asdict(self)


def grid_decode(index: int, config: EnvConfig, levels: int = GRID_LEVELS) -> tuple[float, float]:
    """Cell index -> (bitrate, cpu cap); index = bitrate_level * levels + cpu_level."""
    if not 0 <= index < levels * levels:
        raise IndexError(f"grid index {index} out of range")
    bl, cl = divmod(int(index), levels)
    b_min, b_max = config.bitrate_bounds
    l_min, l_max = config.cpu_bounds
    return (b_min + bl * (b_max - b_min) / (levels - 1),
            l_min + cl * (l_max - l_min) / (levels - 1))


def epsilon_at(step: int, total_steps: int, s: DqnSettings) -> float:
    horizon = max(1.0, s.eps_fraction * total_steps)
    frac = min(1.0, step / horizon)
    return s.eps_start + frac * (s.eps_end - s.eps_start)


class DqnAgent:
    def __init__(self, hyper: SacHyper, settings: DqnSettings, rng: np.random.Generator):
        n_out = settings.levels ** 2
        self.settings = settings
        self.q = Mlp([OBS_DIM, hyper.hidden, hyper.hidden, n_out], rng=rng)
        self.q_targ = Mlp([OBS_DIM, hyper.hidden, hyper.hidden, n_out], rng=rng)
        self.q_targ.copy_from(self.q)
        self.opt = Adam([self.q], hyper.lr_q)
        self.updates = 0


def dqn_act(agent: DqnAgent, obs_norm: np.ndarray, eps: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy grid index. The random draw happens even when eps=0 so
    RNG streams stay aligned across epsilon values."""
    n_out = agent.settings.levels ** 2
    u = rng.random()
    cell = int(rng.integers(n_out))
    if u < eps:
        return cell
    return int(np.argmax(agent.q(obs_norm)))


def dqn_update(agent: DqnAgent, obs, act_idx, reward, next_obs, gamma: float) -> float:
    """One squared-TD step on a batch; target net hard-copied every target_period updates."""
    q_next = agent.q_targ(next_obs)
    y = reward + gamma * q_next.max(axis=1)
    q, cache = agent.q.forward(obs)
    B = len(y)
    rows = np.arange(B)
    err = q[rows, act_idx] - y
    g = np.zeros_like(q)
    g[rows, act_idx] = 2.0 / B * err
    grads, _ = agent.q.backward(cache, g)
    agent.opt.step(grads)
    agent.updates += 1
    if agent.updates % agent.settings.target_period == 0:
        agent.q_targ.copy_from(agent.q)
    return float(np.mean(err ** 2))


class DqnTeam:
    """Independent per-user DQN learners sharing the joint reward."""

    def __init__(self, env_config: EnvConfig, hyper: SacHyper, settings: DqnSettings, seed: int = 0):
        init = np.random.default_rng(np.random.SeedSequence([seed, 13]))
        self.config = env_config
        self.hyper = hyper
        self.settings = settings
        self.n = env_config.n_users
        self.agents = [DqnAgent(hyper, settings, init) for _ in range(self.n)]

    def greedy(self, obs_norm: np.ndarray) -> np.ndarray:
        return np.array([int(np.argmax(a.q(obs_norm[i]))) for i, a in enumerate(self.agents)])

    def decode(self, idx) -> tuple[np.ndarray, np.ndarray]:
        pairs = [grid_decode(int(k), self.config, self.settings.levels) for k in idx]
        return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])

    def state_entries(self):
        out = []
        for i, ag in enumerate(self.agents):
            out += ag.q.state(f"agent{i}.q.") + ag.q_targ.state(f"agent{i}.q_targ.")
            out += ag.opt.named_state(f"agent{i}.opt")
            out.append((f"agent{i}.updates", np.array(float(ag.updates))))
        return out

    def load_arrays(self, arrays):
        from .tensornet import assign_state
        entries = [(n, a) for n, a in self.state_entries() if not n.endswith((".step", ".updates"))]
        assign_state(entries, arrays)
        for i, ag in enumerate(self.agents):
            ag.opt.state.step = int(arrays[f"agent{i}.opt.step"])
            ag.updates = int(arrays[f"agent{i}.updates"])
            ag.q.touch()
            ag.q_targ.touch()


class DqnController:
    def __init__(self, team: DqnTeam):
        self.team = team

    def begin_episode(self, config, rng):
        pass

    def actions(self, obs, config):
        return self.team.decode(self.team.greedy(normalize_obs(obs, config)))


def dqn_train(env_config: EnvConfig, hyper: SacHyper, settings: DqnSettings, episodes: int,
              seed: int, qoe_w=None, reward_w=None, progress=None) -> TrainResult:
    qoe_w = qoe_w or QoeWeights()
    reward_w = reward_w or RewardWeights()
    team = DqnTeam(env_config, hyper, settings, seed)
    ss = np.random.SeedSequence([seed, 17])
    rngs = [np.random.default_rng(s) for s in ss.spawn(2 * team.n)]
    act_rngs, sample_rngs = rngs[:team.n], rngs[team.n:]
    buf = ReplayBuffer(hyper.buffer_size, team.n, env_config.neighbor_k, act_width=1)
    env = MetaverseEnv(env_config)
    total = episodes * env_config.episode_len
    step = 0
    result = TrainResult(team)
    for ep in range(episodes):
        t0 = time.perf_counter()
        obs = normalize_obs(env.reset(episode_seed(seed, 0, ep)), env_config)
        nbrs = env.neighbors.copy()
        ret, losses, mets, done = 0.0, [], [], False
        while not done:
            eps = epsilon_at(step, total, settings)
            idx = np.array([dqn_act(a, obs[i], eps, act_rngs[i]) for i, a in enumerate(team.agents)])
            out = env.step(*team.decode(idx))
            m = step_metrics(out, qoe_w, reward_w, env_config)
            nxt = normalize_obs(out.observations, env_config)
            buf.add(Transition(obs, idx[:, None].astype(float), m.reward, nxt, nbrs,
                               out.neighbors, out.done))
            ret += m.reward
            mets.append(m)
            step += 1
            if len(buf) >= hyper.batch:
                for i, ag in enumerate(team.agents):
                    b = buf.sample(hyper.batch, sample_rngs[i])
                    losses.append(dqn_update(ag, b.state[:, i], b.action[:, i, 0].astype(int),
                                             b.reward, b.next_state[:, i], hyper.gamma))
            obs, nbrs, done = nxt, out.neighbors, out.done
        result.log.append(EpisodeRecord(
            ep, ret, float(np.mean(losses)) if losses else math.nan, math.nan, math.nan,
            float(np.mean([x.overall_qoe for x in mets])),
            float(np.mean([x.v_comm for x in mets])),
            float(np.mean([x.v_comp for x in mets]))))
        result.wall_times.append(time.perf_counter() - t0)
        if progress:
            progress(result.log[-1])
    return result


# ---------------------------------------------------------------------------
# rule-based rate controllers


HISTORY = 8


@dataclass
class RateControllerState:
    current_rate: float
    delay_history: deque = field(default_factory=lambda: deque(maxlen=HISTORY))
    probe_phase: int = 0
    delivered_history: deque = field(default_factory=lambda: deque(maxlen=HISTORY))
    delivered_max: float = 0.0


def _clamp(rate: float, config: EnvConfig) -> float:
    b_min, b_max = config.bitrate_bounds
    return float(min(max(rate, b_min), b_max))


def gcc_like_step(state: RateControllerState, latency: float, jitter: float,
                  config: EnvConfig) -> float:
    """Delay-gradient rule: back off 15% when the recent delay mean rises
    more than 5% over the older one, otherwise grow 5% up to b_max.

    Jitter is accepted for interface parity but the rule only uses delay.
    """
    state.delay_history.append(float(latency))
    hist = list(state.delay_history)
    rising = False
    if len(hist) > 4:
        recent, older = hist[-4:], hist[:-4]
        rising = np.mean(recent) > 1.05 * np.mean(older)
    if rising:
        state.current_rate = _clamp(0.85 * state.current_rate, config)
    else:
        state.current_rate = _clamp(min(1.05 * state.current_rate, config.bitrate_bounds[1]), config)
    return state.current_rate


def bbr_like_step(state: RateControllerState, received: float, latency: float,
                  config: EnvConfig) -> float:
    """Eight-step cycle: one probe at 1.25x the trailing max delivery rate,
    then seven cruise steps at that max."""
    state.delivered_history.append(float(received))
    state.delivered_max = max(state.delivered_history)
    gain = 1.25 if state.probe_phase == 0 else 1.0
    state.probe_phase = (state.probe_phase + 1) % HISTORY
    state.current_rate = _clamp(gain * state.delivered_max, config)
    return state.current_rate


class _GreedyRateController:
    """Per-user rate rule for bitrate, CPU cap pinned to l_max.

    Rates start at b_max; the first observation of an episode is the warm-up
    step, so the rule only reacts from the first real step on.
    """

    def begin_episode(self, config: EnvConfig, rng=None):
        self.states = [RateControllerState(config.bitrate_bounds[1]) for _ in range(config.n_users)]
        self.first = True

    def actions(self, obs, config):
        if not self.first:
            for i, st in enumerate(self.states):
                self._update(st, obs[i], config)
        self.first = False
        rates = np.array([st.current_rate for st in self.states])
        return rates, np.full(config.n_users, config.cpu_bounds[1])


class GccLikeController(_GreedyRateController):
    def _update(self, st, o, config):
        gcc_like_step(st, o[2], o[3], config)


class BbrLikeController(_GreedyRateController):
    def _update(self, st, o, config):
        bbr_like_step(st, o[1], o[2], config)


# ---------------------------------------------------------------------------
# reference policies


def uniform_policy(config: EnvConfig, rng=None) -> tuple[np.ndarray, np.ndarray]:
    n = config.n_users
    b = np.clip(config.total_bandwidth / n, *config.bitrate_bounds)
    c = np.clip(config.available_cpu / n, *config.cpu_bounds)
    return np.full(n, b), np.full(n, c)


def random_policy(config: EnvConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n = config.n_users
    return (rng.uniform(*config.bitrate_bounds, size=n), rng.uniform(*config.cpu_bounds, size=n))


class UniformController:
    def begin_episode(self, config, rng=None):
        pass

    def actions(self, obs, config):
        return uniform_policy(config)


class RandomController:
    def begin_episode(self, config, rng):
        self.rng = rng

    def actions(self, obs, config):
        return random_policy(config, self.rng)
