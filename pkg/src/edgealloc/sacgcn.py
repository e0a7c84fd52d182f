"""Multi-agent soft actor-critic with graph-attention critics.

Each agent owns a squashed-Gaussian actor over its local observation and
two critics (plus slowly tracking targets) over a critic input built from
the global state. ``GraphInput`` is the SAC-GCN input: encoder, A_i @ F
selection and multi-head attention, joined with the joint raw action.
``LocalInput`` is the independent-learner variant (own observation and own
action only) used by the ISAC baseline.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .graphattn import GraphTrunk
from .simenv import ACT_DIM, OBS_DIM, EnvConfig, MetaverseEnv, action_map, normalize_obs
from .qoe import QoeWeights, RewardWeights, StepMetrics, step_metrics
from .tensornet import (Adam, GaussianHead, Mlp, assign_state,
                        soft_update, squashed_backward, squashed_sample)


@dataclass
class SacHyper:
    gamma: float = 0.99
    tau: float = 0.01
    alpha: float = 0.2
    lr_q: float = 1e-4
    lr_pi: float = 5e-4
    batch: int = 64
    buffer_size: int = 5000
    hidden: int = 128
    updates_per_step: int = 1

    def violations(self) -> list[str]:
        errs = []
        if not 0 < self.gamma <= 1:
            errs.append(f"gamma must be in (0, 1] (got {self.gamma})")
        if not 0 < self.tau <= 1:
            errs.append(f"tau must be in (0, 1] (got {self.tau})")
        if self.alpha < 0:
            errs.append(f"alpha must be >= 0 (got {self.alpha})")
        for k in ("lr_q", "lr_pi"):
            if not getattr(self, k) > 0:
                errs.append(f"{k} must be > 0 (got {getattr(self, k)})")
        for k in ("batch", "buffer_size", "hidden", "updates_per_step"):
            if getattr(self, k) < 1:
                errs.append(f"{k} must be >= 1 (got {getattr(self, k)})")
        if self.batch > self.buffer_size:
            errs.append("batch must not exceed buffer_size")
        return errs

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# replay


@dataclass
class Transition:
    state: np.ndarray          # (N, 10) normalized observations
    action: np.ndarray         # (N, act_width) raw joint action
    reward: float
    next_state: np.ndarray
    neighbors: np.ndarray      # (N, k)
    next_neighbors: np.ndarray
    truncated: bool = False


@dataclass
class Batch:
    state: np.ndarray          # (B, N, 10)
    action: np.ndarray
    reward: np.ndarray         # (B,)
    next_state: np.ndarray
    neighbors: np.ndarray      # (B, N, k)
    next_neighbors: np.ndarray
    truncated: np.ndarray

    def __len__(self):
        return len(self.reward)


class ReplayBuffer:
    """Fixed-capacity ring of joint transitions with FIFO eviction."""

    def __init__(self, capacity: int, n_agents: int, neighbor_k: int, act_width: int = ACT_DIM):
        self.capacity = capacity
        self.state = np.zeros((capacity, n_agents, OBS_DIM))
        self.next_state = np.zeros_like(self.state)
        self.action = np.zeros((capacity, n_agents, act_width))
        self.reward = np.zeros(capacity)
        self.neighbors = np.zeros((capacity, n_agents, neighbor_k), dtype=np.int64)
        self.next_neighbors = np.zeros_like(self.neighbors)
        self.truncated = np.zeros(capacity, dtype=bool)
        self.pos = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, tr: Transition) -> None:
        p = self.pos
        self.state[p] = tr.state
        self.action[p] = tr.action
        self.reward[p] = tr.reward
        self.next_state[p] = tr.next_state
        self.neighbors[p] = tr.neighbors
        self.next_neighbors[p] = tr.next_neighbors
        self.truncated[p] = tr.truncated
        self.pos = (p + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def ordered_rewards(self) -> np.ndarray:
        """Stored rewards from oldest to newest."""
        if self.size < self.capacity:
            return self.reward[:self.size].copy()
        return np.concatenate([self.reward[self.pos:], self.reward[:self.pos]])

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self.size < batch_size:
            raise ValueError(f"buffer holds {self.size} < batch {batch_size}")
        idx = rng.integers(0, self.size, size=batch_size)
        return Batch(self.state[idx], self.action[idx], self.reward[idx], self.next_state[idx],
                     self.neighbors[idx], self.next_neighbors[idx], self.truncated[idx])


# ---------------------------------------------------------------------------
# critic inputs


class GraphInput:
    """(h^i || joint raw action), h^i from encoder + A_i @ F + attention."""

    def __init__(self, agent: int, n_agents: int, rng: np.random.Generator):
        self.agent = agent
        self.trunk = GraphTrunk(agent, rng)
        self.h_dim = self.trunk.out_dim
        self.out_dim = self.h_dim + ACT_DIM * n_agents

    @property
    def modules(self):
        return self.trunk.modules

    def forward(self, obs, act, neighbors):
        h, cache = self.trunk.forward(obs, act, neighbors[:, self.agent])
        return np.concatenate([h, act.reshape(len(act), -1)], axis=1), cache

    def backward(self, cache, dx, need_params=True):
        grads, _, d_act = self.trunk.backward(cache, dx[:, :self.h_dim], need_params)
        d_act = d_act + dx[:, self.h_dim:].reshape(d_act.shape)
        return grads, d_act


class LocalInput:
    """Own normalized observation || own raw action; no parameters."""

    def __init__(self, agent: int, n_agents: int, rng: np.random.Generator | None = None):
        self.agent = agent
        self.n_agents = n_agents
        self.out_dim = OBS_DIM + ACT_DIM

    @property
    def modules(self):
        return []

    def forward(self, obs, act, neighbors):
        i = self.agent
        return np.concatenate([obs[:, i], act[:, i]], axis=1), act.shape

    def backward(self, cache, dx, need_params=True):
        d_act = np.zeros(cache)
        d_act[:, self.agent] = dx[:, OBS_DIM:]
        return [], d_act


CRITIC_INPUTS = {"graph": GraphInput, "local": LocalInput}


# ---------------------------------------------------------------------------
# agents


class SacAgent:
    def __init__(self, agent: int, n_agents: int, hyper: SacHyper, rng: np.random.Generator,
                 critic_input: str = "graph"):
        build = CRITIC_INPUTS[critic_input]
        hid = hyper.hidden
        self.index = agent
        self.actor = Mlp([OBS_DIM, hid, hid, 2 * ACT_DIM], rng=rng)
        self.cin = build(agent, n_agents, rng)
        self.q1 = Mlp([self.cin.out_dim, hid, hid, 1], rng=rng)
        self.q2 = Mlp([self.cin.out_dim, hid, hid, 1], rng=rng)
        self.cin_targ = build(agent, n_agents, rng)
        self.q1_targ = Mlp([self.cin.out_dim, hid, hid, 1], rng=rng)
        self.q2_targ = Mlp([self.cin.out_dim, hid, hid, 1], rng=rng)
        for dst, src in self.target_pairs():
            dst.copy_from(src)
        self.q_opt = Adam(self.cin.modules + [self.q1, self.q2], hyper.lr_q)
        self.pi_opt = Adam([self.actor], hyper.lr_pi)

    def target_pairs(self):
        return list(zip(self.cin_targ.modules + [self.q1_targ, self.q2_targ],
                        self.cin.modules + [self.q1, self.q2]))

    def named_modules(self):
        mods = [("actor", self.actor), ("q1", self.q1), ("q2", self.q2),
                ("q1_targ", self.q1_targ), ("q2_targ", self.q2_targ)]
        for k, m in enumerate(self.cin.modules):
            mods.append((f"trunk{k}", m))
        for k, m in enumerate(self.cin_targ.modules):
            mods.append((f"trunk{k}_targ", m))
        return mods

    def policy(self, obs_i: np.ndarray):
        out, cache = self.actor.forward(obs_i)
        return GaussianHead.from_output(out), cache


@dataclass
class UpdateStats:
    q_loss: float
    pi_loss: float
    entropy: float


class SacLearner:
    """All agents of one multi-agent SAC run (SAC-GCN or ISAC)."""

    def __init__(self, env_config: EnvConfig, hyper: SacHyper, seed: int = 0,
                 critic_input: str = "graph"):
        self.config = env_config
        self.hyper = hyper
        self.n = env_config.n_users
        self.critic_input = critic_input
        init = np.random.default_rng(np.random.SeedSequence([seed, 11]))
        self.agents = [SacAgent(i, self.n, hyper, init, critic_input) for i in range(self.n)]

    # -- acting ------------------------------------------------------------

    def act(self, i: int, obs_i: np.ndarray, mode: str = "exploit",
            rng: np.random.Generator | None = None) -> np.ndarray:
        """Raw action in (-1, 1)^2 from agent i's local normalized observation."""
        head, _ = self.agents[i].policy(np.asarray(obs_i, dtype=np.float64)[None])
        if mode == "exploit":
            return np.tanh(head.mu[0])
        if mode != "explore":
            raise ValueError(f"unknown mode {mode!r}")
        xi = rng.standard_normal(ACT_DIM)
        a, _, _ = squashed_sample(head, xi[None])
        return a[0]

    def act_all(self, obs_norm: np.ndarray, mode: str, rng=None) -> np.ndarray:
        return np.stack([self.act(i, obs_norm[i], mode, rng) for i in range(self.n)])

    def physical(self, raw: np.ndarray):
        return action_map(np.clip(raw, -1.0, 1.0), self.config)

    def sample_joint(self, obs: np.ndarray, noise: np.ndarray):
        """Fresh actions for every agent on a batch. noise: (B, N, 2)."""
        acts, logps, caches = [], [], []
        for j, ag in enumerate(self.agents):
            head, acache = ag.policy(obs[:, j])
            a, lp, scache = squashed_sample(head, noise[:, j])
            acts.append(a)
            logps.append(lp)
            caches.append((acache, scache))
        return np.stack(acts, axis=1), np.stack(logps, axis=1), caches

    # -- learning ----------------------------------------------------------

    def critic_target(self, i: int, batch: Batch, noise: np.ndarray) -> np.ndarray:
        """Soft TD target for agent i; bootstraps through truncation."""
        ag, hp = self.agents[i], self.hyper
        a_next, logp_next, _ = self.sample_joint(batch.next_state, noise)
        x, _ = ag.cin_targ.forward(batch.next_state, a_next, batch.next_neighbors)
        q_min = np.minimum(ag.q1_targ(x)[:, 0], ag.q2_targ(x)[:, 0])
        return batch.reward + hp.gamma * (q_min - hp.alpha * logp_next[:, i])

    def critic_loss_grads(self, i: int, batch: Batch, target: np.ndarray):
        """Mean squared TD errors of both critics and their parameter gradients."""
        ag = self.agents[i]
        x, ccache = ag.cin.forward(batch.state, batch.action, batch.neighbors)
        q1, c1 = ag.q1.forward(x)
        q2, c2 = ag.q2.forward(x)
        e1, e2 = q1[:, 0] - target, q2[:, 0] - target
        B = len(target)
        g1, dx1 = ag.q1.backward(c1, (2.0 / B * e1)[:, None])
        g2, dx2 = ag.q2.backward(c2, (2.0 / B * e2)[:, None])
        gtrunk, _ = ag.cin.backward(ccache, dx1 + dx2)
        loss = float(np.mean(e1 ** 2) + np.mean(e2 ** 2))
        return loss, gtrunk + g1 + g2

    def update_critics(self, i: int, batch: Batch, target: np.ndarray) -> float:
        loss, grads = self.critic_loss_grads(i, batch, target)
        self.agents[i].q_opt.step(grads)
        return loss

    def policy_loss_grads(self, i: int, batch: Batch, noise: np.ndarray):
        """Loss = mean(alpha * log pi_i - min_j Q_j) with agent i reparameterized."""
        ag, hp = self.agents[i], self.hyper
        acts, logps, caches = self.sample_joint(batch.state, noise)
        x, ccache = ag.cin.forward(batch.state, acts, batch.neighbors)
        q1, c1 = ag.q1.forward(x)
        q2, c2 = ag.q2.forward(x)
        q1, q2 = q1[:, 0], q2[:, 0]
        use1 = q1 <= q2
        q_min = np.where(use1, q1, q2)
        B = len(q_min)
        loss = float(np.mean(hp.alpha * logps[:, i] - q_min))
        _, dx1 = ag.q1.backward(c1, np.where(use1, -1.0 / B, 0.0)[:, None], need_params=False)
        _, dx2 = ag.q2.backward(c2, np.where(use1, 0.0, -1.0 / B)[:, None], need_params=False)
        _, d_act = ag.cin.backward(ccache, dx1 + dx2, need_params=False)
        acache, scache = caches[i]
        d_out = squashed_backward(scache, d_act[:, i], np.full(B, hp.alpha / B))
        grads, _ = ag.actor.backward(acache, d_out)
        return loss, grads, float(-np.mean(logps[:, i]))

    def update_policy(self, i: int, batch: Batch, noise: np.ndarray) -> tuple[float, float]:
        loss, grads, ent = self.policy_loss_grads(i, batch, noise)
        self.agents[i].pi_opt.step(grads)
        return loss, ent

    def soft_update(self, i: int) -> None:
        for dst, src in self.agents[i].target_pairs():
            soft_update(dst, src, self.hyper.tau)

    def update_agent(self, i: int, batch: Batch, rng: np.random.Generator) -> UpdateStats:
        shape = (len(batch), self.n, ACT_DIM)
        y = self.critic_target(i, batch, rng.standard_normal(shape))
        q_loss = self.update_critics(i, batch, y)
        pi_loss, ent = self.update_policy(i, batch, rng.standard_normal(shape))
        self.soft_update(i)
        return UpdateStats(q_loss, pi_loss, ent)

    # -- persistence -------------------------------------------------------

    def state_entries(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, ag in enumerate(self.agents):
            for name, mod in ag.named_modules():
                out += mod.state(f"agent{i}.{name}.")
            out += ag.q_opt.named_state(f"agent{i}.q_opt")
            out += ag.pi_opt.named_state(f"agent{i}.pi_opt")
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        assign_state(self.state_entries(), arrays)
        for i, ag in enumerate(self.agents):
            ag.q_opt.state.step = int(arrays[f"agent{i}.q_opt.step"])
            ag.pi_opt.state.step = int(arrays[f"agent{i}.pi_opt.step"])
            for _, mod in ag.named_modules():
                mod.touch()

    def param_checksum(self) -> float:
        return float(sum(np.sum(p) for _, p in self.state_entries()))


# ---------------------------------------------------------------------------
# rollout / training


def episode_seed(seed: int, stream: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, stream, episode]).generate_state(1)[0])


@dataclass
class EpisodeRecord:
    episode: int
    cumulative_reward: float
    q_loss: float
    pi_loss: float
    entropy: float
    overall_qoe: float
    v_comm: float
    v_comp: float

    def as_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    learner: object
    log: list[EpisodeRecord] = field(default_factory=list)
    wall_times: list[float] = field(default_factory=list)


class SacController:
    """Exploit-mode adapter so a trained learner can be evaluated like any policy."""

    def __init__(self, learner: SacLearner):
        self.learner = learner

    def begin_episode(self, config: EnvConfig, rng: np.random.Generator) -> None:
        pass

    def actions(self, obs: np.ndarray, config: EnvConfig):
        raw = self.learner.act_all(normalize_obs(obs, config), "exploit")
        return self.learner.physical(raw)


def train(env_config: EnvConfig, hyper: SacHyper, episodes: int, seed: int,
          qoe_w: QoeWeights | None = None, reward_w: RewardWeights | None = None,
          critic_input: str = "graph", learner: SacLearner | None = None,
          progress=None) -> TrainResult:
    """Centralized training loop: act, store, then per-agent sample/update."""
    import time

    qoe_w = qoe_w or QoeWeights()
    reward_w = reward_w or RewardWeights()
    learner = learner or SacLearner(env_config, hyper, seed, critic_input)
    ss = np.random.SeedSequence([seed, 7])
    act_rng, *agent_rngs = [np.random.default_rng(s) for s in ss.spawn(1 + 2 * learner.n)]
    sample_rngs, noise_rngs = agent_rngs[:learner.n], agent_rngs[learner.n:]
    buf = ReplayBuffer(hyper.buffer_size, learner.n, env_config.neighbor_k)
    env = MetaverseEnv(env_config)
    result = TrainResult(learner)
    for ep in range(episodes):
        t0 = time.perf_counter()
        obs = normalize_obs(env.reset(episode_seed(seed, 0, ep)), env_config)
        nbrs = env.neighbors.copy()
        ret, stats, mets = 0.0, [], []
        done = False
        while not done:
            raw = learner.act_all(obs, "explore", act_rng)
            out = env.step(*learner.physical(raw))
            m = step_metrics(out, qoe_w, reward_w, env_config)
            nxt = normalize_obs(out.observations, env_config)
            buf.add(Transition(obs, raw, m.reward, nxt, nbrs, out.neighbors, out.done))
            ret += m.reward
            mets.append(m)
            if len(buf) >= hyper.batch:
                for _ in range(hyper.updates_per_step):
                    for i in range(learner.n):
                        batch = buf.sample(hyper.batch, sample_rngs[i])
                        stats.append(learner.update_agent(i, batch, noise_rngs[i]))
            obs, nbrs, done = nxt, out.neighbors, out.done
        result.log.append(EpisodeRecord(
            ep, ret,
            float(np.mean([s.q_loss for s in stats])) if stats else math.nan,
            float(np.mean([s.pi_loss for s in stats])) if stats else math.nan,
            float(np.mean([s.entropy for s in stats])) if stats else math.nan,
            float(np.mean([m.overall_qoe for m in mets])),
            float(np.mean([m.v_comm for m in mets])),
            float(np.mean([m.v_comp for m in mets])),
        ))
        result.wall_times.append(time.perf_counter() - t0)
        if progress:
            progress(result.log[-1])
    return result


def rollout(controller, env_config: EnvConfig, episodes: int, seed: int,
            qoe_w: QoeWeights | None = None, reward_w: RewardWeights | None = None,
            stream: int = 1) -> list[list[StepMetrics]]:
    """Run ``episodes`` evaluation episodes; returns per-step metrics per episode."""
    qoe_w = qoe_w or QoeWeights()
    reward_w = reward_w or RewardWeights()
    env = MetaverseEnv(env_config)
    policy_rng = np.random.default_rng(np.random.SeedSequence([seed, stream, 99]))
    out = []
    for ep in range(episodes):
        obs = env.reset(episode_seed(seed, stream, ep))
        controller.begin_episode(env_config, policy_rng)
        steps = []
        done = False
        while not done:
            bitrate, cap = controller.actions(obs, env_config)
            res = env.step(bitrate, cap)
            steps.append(step_metrics(res, qoe_w, reward_w, env_config))
            obs, done = res.observations, res.done
        out.append(steps)
    return out


def evaluate(learner: SacLearner, env_config: EnvConfig, episodes: int, seed: int,
             qoe_w: QoeWeights | None = None, reward_w: RewardWeights | None = None):
    return rollout(SacController(learner), env_config, episodes, seed, qoe_w, reward_w)


def learner_from_checkpoint(arrays: dict, meta: dict, env_config: EnvConfig,
                            hyper: SacHyper) -> SacLearner:
    kind = meta.get("critic_input", "graph")
    learner = SacLearner(env_config, hyper, 0, kind)
    learner.load_arrays(arrays)
    return learner
