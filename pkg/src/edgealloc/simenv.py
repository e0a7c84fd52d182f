"""Synthetic multi-user edge environment.

N users stream remotely rendered scenes from one edge node. Each step every
user picks a target bitrate and a CPU-usage cap; bandwidth is shared max-min
fairly, CPU is scaled down proportionally when oversubscribed, and each user
observes the 10-field tuple (x, y, l, j, p, n, z, u, e, d).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction

import numpy as np

from .tensornet import ContractError

OBS_FIELDS = ("x", "y", "l", "j", "p", "n", "z", "u", "e", "d")
OBS_DIM = len(OBS_FIELDS)
ACT_DIM = 2

# congestion sensitivity of delay and loss
KAPPA_DELAY = 2.0
KAPPA_LOSS = 0.05

MOTION_BOUNDS = (0.2, 2.0)
BASE_CPU_DEMAND = 0.2        # CPU fraction needed for target_fps at motion 1.0
PACKET_BITS = 1200 * 8
JITTER_SCALE = 0.1           # jitter std as a fraction of base delay
WORLD_SIZE = 100.0
STEP_SECONDS = 1.0

# fixed observation scales for network inputs
DELAY_SCALE_MS = 200.0
COUNT_SCALE = 100.0


class ConfigError(ValueError):
    """Invalid configuration. ``errors`` lists every violated bound."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class LifecycleError(RuntimeError):
    pass


@dataclass
class EnvConfig:
    n_users: int = 3
    total_bandwidth: float = 300.0
    base_delay: float = 20.0
    base_loss_rate: float = 0.005
    available_cpu: float = 0.8
    target_fps: float = 60.0
    episode_len: int = 40
    bitrate_bounds: tuple[float, float] = (5.0, 100.0)
    cpu_bounds: tuple[float, float] = (0.05, 0.95)
    neighbor_k: int | None = None    # None -> min(2, n_users - 1)
    motion_volatility: float = 0.2
    seed: int = 0

    def __post_init__(self):
        self.bitrate_bounds = tuple(float(v) for v in self.bitrate_bounds)
        self.cpu_bounds = tuple(float(v) for v in self.cpu_bounds)
        if self.neighbor_k is None:
            self.neighbor_k = min(2, max(int(self.n_users) - 1, 0))

    def violations(self) -> list[str]:
        errs = []
        b_min, b_max = self.bitrate_bounds
        l_min, l_max = self.cpu_bounds
        if self.n_users < 1:
            errs.append(f"n_users must be >= 1 (got {self.n_users})")
        if not b_min > 0:
            errs.append(f"bitrate_bounds: b_min must be > 0 (got {b_min})")
        if not b_min < b_max:
            errs.append(f"bitrate_bounds: b_min < b_max required (got {b_min}, {b_max})")
        if not (0 < l_min < l_max <= 1):
            errs.append(f"cpu_bounds: 0 < l_min < l_max <= 1 required (got {l_min}, {l_max})")
        if self.episode_len < 1:
            errs.append(f"episode_len must be >= 1 (got {self.episode_len})")
        if self.neighbor_k < 0 or self.neighbor_k > max(self.n_users - 1, 0):
            errs.append(f"neighbor_k must be in [0, n_users-1] (got {self.neighbor_k})")
        if not self.total_bandwidth > 0:
            errs.append(f"total_bandwidth must be > 0 (got {self.total_bandwidth})")
        if self.base_delay < 0:
            errs.append(f"base_delay must be >= 0 (got {self.base_delay})")
        if not 0 <= self.base_loss_rate <= 1:
            errs.append(f"base_loss_rate must be in [0, 1] (got {self.base_loss_rate})")
        if not 0 < self.available_cpu <= 1:
            errs.append(f"available_cpu must be in (0, 1] (got {self.available_cpu})")
        if not self.target_fps > 0:
            errs.append(f"target_fps must be > 0 (got {self.target_fps})")
        if self.motion_volatility < 0:
            errs.append(f"motion_volatility must be >= 0 (got {self.motion_volatility})")
        return errs

    def validate(self) -> "EnvConfig":
        errs = self.violations()
        if errs:
            raise ConfigError(errs)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bitrate_bounds"] = list(self.bitrate_bounds)
        d["cpu_bounds"] = list(self.cpu_bounds)
        return d


@dataclass
class Users:
    """Per-user state held as parallel arrays (one row per user)."""
    position: np.ndarray          # (N, 2)
    motion_intensity: np.ndarray  # (N,)
    cpu_demand: np.ndarray        # (N,)
    prev_received: np.ndarray     # (N,) received bitrate of the previous step

    def copy(self) -> "Users":
        return Users(*(getattr(self, f.name).copy() for f in fields(self)))


@dataclass
class NetworkResult:
    received: np.ndarray
    latency: np.ndarray
    jitter: np.ndarray
    lost: np.ndarray
    nacks: np.ndarray
    loss_fraction: float
    congestion: float


@dataclass
class CpuResult:
    granted: np.ndarray
    available: np.ndarray
    fps: np.ndarray
    frame_delay: np.ndarray


@dataclass
class StepOutcome:
    observations: np.ndarray      # (N, 10)
    received: np.ndarray          # y
    fps_received: np.ndarray      # e * (1 - loss)
    latency: np.ndarray           # l
    prev_received: np.ndarray     # y of the previous step, for the instability term
    granted_cpu: np.ndarray       # g
    neighbors: np.ndarray         # (N, k) neighbor indices after this step
    done: bool
    info: dict = field(default_factory=dict)


def action_map(raw, config: EnvConfig) -> tuple:
    """Affine map from raw [-1, 1]^2 to (bitrate Mbps, cpu cap fraction).

    Works on a single pair or on an array whose last axis has length 2.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != ACT_DIM:
        raise ContractError(f"raw action must end in a pair, got shape {raw.shape}")
    if np.any(raw < -1.0) or np.any(raw > 1.0) or not np.all(np.isfinite(raw)):
        raise ContractError("raw action components must lie in [-1, 1]")
    b_min, b_max = config.bitrate_bounds
    l_min, l_max = config.cpu_bounds
    half = (raw + 1.0) / 2.0
    bitrate = b_min + half[..., 0] * (b_max - b_min)
    cap = l_min + half[..., 1] * (l_max - l_min)
    if raw.ndim == 1:
        return float(bitrate), float(cap)
    return bitrate, cap


def inverse_action_map(bitrate, cap, config: EnvConfig) -> np.ndarray:
    b_min, b_max = config.bitrate_bounds
    l_min, l_max = config.cpu_bounds
    rb = 2.0 * (np.asarray(bitrate, dtype=np.float64) - b_min) / (b_max - b_min) - 1.0
    rc = 2.0 * (np.asarray(cap, dtype=np.float64) - l_min) / (l_max - l_min) - 1.0
    return np.clip(np.stack([rb, rc], axis=-1), -1.0, 1.0)


def float_floor(x: Fraction) -> float:
    """Largest float not exceeding the rational ``x``."""
    f = float(x)
    if Fraction(f) > x:
        f = math.nextafter(f, -math.inf)
    return f


def max_min_share(demands, capacity: float) -> np.ndarray:
    """Water-filling: nobody gets more than asked, leftovers split evenly.

    The water level is found in exact rational arithmetic and rounded down,
    so the allocation never sums above ``capacity``.
    """
    d = [Fraction(float(v)) for v in np.asarray(demands, dtype=np.float64).ravel()]
    cap = Fraction(float(capacity))
    if sum(d, Fraction(0)) <= cap:
        return np.asarray(demands, dtype=np.float64).copy()
    ordered = sorted(d)
    n = len(ordered)
    spent = Fraction(0)
    level = None
    for k, dk in enumerate(ordered):
        if dk * (n - k) + spent > cap:
            level = (cap - spent) / (n - k)
            break
        spent += dk
    lvl = float_floor(level)
    return np.array([float(v) if v <= level else lvl for v in d])


def packets_sent(rate_mbps) -> np.ndarray:
    return np.asarray(rate_mbps) * 1e6 * STEP_SECONDS / PACKET_BITS


def network_transit(chosen_rates, config: EnvConfig, rng: np.random.Generator) -> NetworkResult:
    rates = np.asarray(chosen_rates, dtype=np.float64)
    y = max_min_share(rates, config.total_bandwidth)
    rho = float(rates.sum() / config.total_bandwidth)
    over = max(0.0, rho - 1.0)
    # one draw per user regardless of load keeps RNG streams aligned
    noise = rng.normal(0.0, JITTER_SCALE * config.base_delay, size=rates.shape)
    latency = np.maximum(config.base_delay * (1.0 + over * KAPPA_DELAY) + noise, 0.0)
    jitter = np.abs(noise)
    loss = float(np.clip(config.base_loss_rate + over * KAPPA_LOSS, 0.0, 1.0))
    lost = loss * packets_sent(y)
    return NetworkResult(y, latency, jitter, lost, lost.copy(), loss, rho)


def cpu_transit(cpu_caps, users: Users, config: EnvConfig) -> CpuResult:
    caps = np.asarray(cpu_caps, dtype=np.float64)
    total = caps.sum()
    if total > config.available_cpu:
        granted = np.minimum(caps, config.available_cpu * caps / total)
    else:
        granted = caps.copy()
    fps = config.target_fps * np.minimum(1.0, granted / users.cpu_demand)
    frame_delay = 1000.0 / fps
    available = np.full_like(caps, config.available_cpu)
    return CpuResult(granted, available, fps, frame_delay)


def motion_update(users: Users, rng: np.random.Generator, config: EnvConfig) -> Users:
    lo, hi = MOTION_BOUNDS
    n = len(users.motion_intensity)
    step = rng.uniform(-config.motion_volatility, config.motion_volatility, size=n)
    m = users.motion_intensity + step
    # reflect (possibly more than once for large steps)
    for _ in range(4):
        m = np.where(m > hi, 2 * hi - m, m)
        m = np.where(m < lo, 2 * lo - m, m)
    m = np.clip(m, lo, hi)
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    pos = users.position + m[:, None] * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    pos = np.where(pos > WORLD_SIZE, 2 * WORLD_SIZE - pos, pos)
    pos = np.abs(pos)
    out = users.copy()
    out.position = pos
    out.motion_intensity = m
    out.cpu_demand = BASE_CPU_DEMAND * m
    return out


def neighbor_graph(positions, neighbor_k: int) -> np.ndarray:
    """k nearest users by distance (ties -> lower index), sorted ascending.

    Returns an int array of shape (N, k).
    """
    pos = np.asarray(positions, dtype=np.float64)
    n = len(pos)
    if neighbor_k > max(n - 1, 0):
        raise ContractError(f"neighbor_k={neighbor_k} exceeds n_users-1={n - 1}")
    out = np.zeros((n, neighbor_k), dtype=np.int64)
    if neighbor_k == 0:
        return out
    d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
    for i in range(n):
        others = [j for j in range(n) if j != i]
        others.sort(key=lambda j: (d2[i, j], j))
        out[i] = sorted(others[:neighbor_k])
    return out


def normalize_obs(obs: np.ndarray, config: EnvConfig) -> np.ndarray:
    b_max = config.bitrate_bounds[1]
    scale = np.array([b_max, b_max, DELAY_SCALE_MS, DELAY_SCALE_MS, COUNT_SCALE, COUNT_SCALE,
                      1.0, 1.0, config.target_fps, DELAY_SCALE_MS])
    return np.asarray(obs, dtype=np.float64) / scale


class MetaverseEnv:
    """Dec-POMDP over ``n_users`` agents sharing bandwidth and CPU."""

    def __init__(self, config: EnvConfig):
        self.config = config.validate()
        self.rng: np.random.Generator | None = None
        self.users: Users | None = None
        self.t = 0
        self.done = True
        self.neighbors = np.zeros((config.n_users, config.neighbor_k), dtype=np.int64)

    def reset(self, seed: int | None = None) -> np.ndarray:
        cfg = self.config
        self.rng = np.random.default_rng(cfg.seed if seed is None else seed)
        n = cfg.n_users
        pos = self.rng.uniform(0.0, WORLD_SIZE, size=(n, 2))
        motion = self.rng.uniform(*MOTION_BOUNDS, size=n)
        self.users = Users(pos, motion, BASE_CPU_DEMAND * motion, np.zeros(n))
        self.t = 0
        self.done = False
        rates = np.full(n, cfg.bitrate_bounds[0])
        caps = np.full(n, cfg.cpu_bounds[0])
        obs, net, _ = self._observe(rates, caps)
        self.users.prev_received = net.received.copy()
        self.neighbors = neighbor_graph(self.users.position, cfg.neighbor_k)
        return obs

    def _observe(self, rates, caps):
        net = network_transit(rates, self.config, self.rng)
        cpu = cpu_transit(caps, self.users, self.config)
        obs = np.stack([rates, net.received, net.latency, net.jitter, net.lost, net.nacks,
                        caps, cpu.available, cpu.fps, cpu.frame_delay], axis=1)
        return obs, net, cpu

    def step(self, bitrates, cpu_caps) -> StepOutcome:
        if self.done or self.users is None:
            raise LifecycleError("step() called on a finished or un-reset episode")
        cfg = self.config
        rates = np.asarray(bitrates, dtype=np.float64)
        caps = np.asarray(cpu_caps, dtype=np.float64)
        if rates.shape != (cfg.n_users,) or caps.shape != (cfg.n_users,):
            raise ContractError(f"need one action per user ({cfg.n_users})")
        self.users = motion_update(self.users, self.rng, cfg)
        obs, net, cpu = self._observe(rates, caps)
        prev = self.users.prev_received.copy()
        self.users.prev_received = net.received.copy()
        self.neighbors = neighbor_graph(self.users.position, cfg.neighbor_k)
        self.t += 1
        self.done = self.t >= cfg.episode_len
        return StepOutcome(
            observations=obs,
            received=net.received,
            fps_received=cpu.fps * (1.0 - net.loss_fraction),
            latency=net.latency,
            prev_received=prev,
            granted_cpu=cpu.granted,
            neighbors=self.neighbors.copy(),
            done=self.done,
            info={"congestion": net.congestion, "loss_fraction": net.loss_fraction},
        )

    def step_raw(self, raw_actions) -> StepOutcome:
        bitrate, cap = action_map(np.asarray(raw_actions, dtype=np.float64).reshape(-1, ACT_DIM),
                                  self.config)
        return self.step(bitrate, cap)


def reset(config: EnvConfig, seed: int) -> tuple[MetaverseEnv, np.ndarray]:
    env = MetaverseEnv(config)
    return env, env.reset(seed)
