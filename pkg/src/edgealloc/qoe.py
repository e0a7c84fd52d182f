"""Per-user QoE, overall QoE, allocation-balance variances and the shared reward."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .tensornet import ContractError


class DomainError(ValueError):
    pass


@dataclass
class QoeWeights:
    alpha: float = 1.0       # scene satisfaction
    beta: float = 0.2        # choppiness
    gamma_l: float = 0.05    # latency
    delta: float = 0.5       # instability
    y_min: float = 5.0       # Mbps
    l_min_ms: float = 20.0
    f_target: float = 60.0

    def violations(self) -> list[str]:
        errs = [f"{k} must be >= 0 (got {getattr(self, k)})"
                for k in ("alpha", "beta", "gamma_l", "delta") if getattr(self, k) < 0]
        if not self.y_min > 0:
            errs.append(f"y_min must be > 0 (got {self.y_min})")
        if not self.l_min_ms > 0:
            errs.append(f"l_min_ms must be > 0 (got {self.l_min_ms})")
        return errs

    def to_dict(self):
        return asdict(self)


@dataclass
class RewardWeights:
    w1: float = 2.0
    w2: float = -0.6
    w3: float = -0.6

    def violations(self) -> list[str]:
        return [f"{k} must be finite" for k in ("w1", "w2", "w3") if not math.isfinite(getattr(self, k))]

    def to_dict(self):
        return asdict(self)


@dataclass
class QoeBreakdown:
    quality: float
    choppiness_pen: float
    latency_pen: float
    instability_pen: float
    total: float


@dataclass
class StepMetrics:
    overall_qoe: float
    v_comm: float
    v_comp: float
    reward: float
    util_comm: float
    util_comp: float


def scene_quality(y, y_min):
    """Natural log of the bitrate ratio; y below y_min is lifted to y_min."""
    if not y_min > 0:
        raise DomainError(f"y_min must be positive (got {y_min})")
    y = np.asarray(y, dtype=np.float64)
    if np.any(~(y > 0)):
        raise DomainError("bitrate must be positive")
    q = np.log(np.maximum(y, y_min) / y_min)
    return float(q) if q.ndim == 0 else q


def latency_penalty(l, l_min_ms):
    if not l_min_ms > 0:
        raise DomainError(f"l_min_ms must be positive (got {l_min_ms})")
    p = np.exp(np.asarray(l, dtype=np.float64) / l_min_ms)
    return float(p) if p.ndim == 0 else p


def qoe_step(y: float, f_received: float, l: float, prev_quality: float,
             weights: QoeWeights) -> QoeBreakdown:
    q = scene_quality(y, weights.y_min)
    quality = weights.alpha * q
    chop = weights.beta * abs(f_received - weights.f_target)
    lat = weights.gamma_l * latency_penalty(l, weights.l_min_ms)
    inst = weights.delta * abs(q - prev_quality)
    return QoeBreakdown(quality, chop, lat, inst, quality - chop - lat - inst)


def qoe_vector(y, f_received, l, prev_y, weights: QoeWeights) -> np.ndarray:
    """Vectorised per-user totals; prev_y is the previous received bitrate."""
    q = scene_quality(np.asarray(y, dtype=np.float64), weights.y_min)
    q_prev = scene_quality(np.asarray(prev_y, dtype=np.float64), weights.y_min)
    return (weights.alpha * q
            - weights.beta * np.abs(np.asarray(f_received) - weights.f_target)
            - weights.gamma_l * latency_penalty(l, weights.l_min_ms)
            - weights.delta * np.abs(q - q_prev))


def overall_qoe(breakdowns: Sequence[QoeBreakdown]) -> float:
    if len(breakdowns) == 0:
        raise ContractError("overall_qoe needs at least one user")
    return float(sum(b.total for b in breakdowns))


def _sample_variance(values) -> float:
    """N-1 denominator variance, correctly rounded via exact rationals.

    Uses the pairwise form sum_{i<j} (x_i - x_j)^2 / (n (n - 1)); the result
    is exactly 0 iff all values are equal.
    """
    v = [Fraction(float(x)) for x in np.asarray(values, dtype=np.float64).ravel()]
    n = len(v)
    if n < 2:
        raise ContractError("variance needs at least two users")
    acc = sum(((v[i] - v[j]) ** 2 for i in range(n) for j in range(i + 1, n)), Fraction(0))
    return float(acc / (n * (n - 1)))


def variance_comm(bitrates) -> float:
    return _sample_variance(bitrates)


def variance_comp(cpu_shares) -> float:
    return _sample_variance(cpu_shares)


def reward(overall: float, v_comm: float, v_comp: float, weights: RewardWeights) -> float:
    return weights.w1 * overall + weights.w2 * v_comm + weights.w3 * v_comp


def utilization(bitrates, total_bandwidth: float, cpu_shares, available_cpu: float) -> tuple[float, float]:
    if not total_bandwidth > 0 or not available_cpu > 0:
        raise DomainError("utilization denominators must be positive")
    uc = float(np.clip(np.sum(bitrates) / total_bandwidth, 0.0, 1.0))
    up = float(np.clip(np.sum(cpu_shares) / available_cpu, 0.0, 1.0))
    return uc, up


def normalize_series(values) -> list[float]:
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return [0.0] * len(v)
    return list(((v - lo) / (hi - lo)).astype(float))


def step_metrics(outcome, qoe_w: QoeWeights, reward_w: RewardWeights, env_config) -> StepMetrics:
    """All per-step metrics from a simenv StepOutcome."""
    totals = qoe_vector(outcome.received, outcome.fps_received, outcome.latency,
                        outcome.prev_received, qoe_w)
    q_t = float(totals.sum())
    n = len(totals)
    vc = variance_comm(outcome.received) if n > 1 else 0.0
    vp = variance_comp(outcome.granted_cpu) if n > 1 else 0.0
    uc, up = utilization(outcome.received, env_config.total_bandwidth,
                         outcome.granted_cpu, env_config.available_cpu)
    return StepMetrics(q_t, vc, vp, reward(q_t, vc, vp, reward_w), uc, up)
