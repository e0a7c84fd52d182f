import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from edgealloc.qoe import (DomainError, QoeWeights, RewardWeights, latency_penalty, normalize_series,
                           overall_qoe, qoe_step, qoe_vector, reward, scene_quality, step_metrics,
                           utilization, variance_comm, variance_comp)
from edgealloc.simenv import EnvConfig, reset
from edgealloc.tensornet import ContractError

from oracles import qoe_user, sample_var, step_reward

W = QoeWeights()
RW = RewardWeights()


def test_scene_quality_examples():
    assert scene_quality(5.0, 5.0) == 0.0
    assert abs(scene_quality(10.0, 5.0) - math.log(2)) < 1e-12
    assert abs(scene_quality(math.e * 5.0, 5.0) - 1.0) < 1e-12
    assert scene_quality(1.0, 5.0) == 0.0       # clamped up to y_min


def test_scene_quality_domain():
    with pytest.raises(DomainError):
        scene_quality(0.0, 5.0)
    with pytest.raises(DomainError):
        scene_quality(5.0, 0.0)


def test_latency_penalty_examples():
    assert abs(latency_penalty(20.0, 20.0) - math.e) < 1e-12
    assert latency_penalty(0.0, 3.0) == 1.0
    assert abs(latency_penalty(40.0, 20.0) - math.e ** 2) < 1e-12
    with pytest.raises(DomainError):
        latency_penalty(1.0, 0.0)


def test_qoe_step_examples():
    b = qoe_step(5.0, 60.0, 0.0, 0.0, W)
    assert b.total == pytest.approx(-0.05, abs=1e-15)
    assert qoe_step(30.0, 60.0, 10.0, 0.0, W).choppiness_pen == 0.0
    q = scene_quality(30.0, 5.0)
    assert qoe_step(30.0, 45.0, 10.0, q, W).instability_pen == 0.0


@given(st.floats(0.1, 200), st.floats(0, 60), st.floats(0, 200), st.floats(0, 4))
def test_breakdown_identity_exact(y, f, l, prev):
    b = qoe_step(y, f, l, prev, W)
    assert b.total == b.quality - b.choppiness_pen - b.latency_pen - b.instability_pen


def test_overall_qoe_examples():
    mk = lambda t: qoe_step(5.0, 60.0, 0.0, 0.0, QoeWeights(gamma_l=-t))  # latency term = -(-t)*1
    assert overall_qoe([mk(0.5)] * 3) == pytest.approx(1.5)
    assert overall_qoe([mk(0.7)]) == pytest.approx(0.7)
    assert overall_qoe([mk(1.0), mk(-1.0)]) == pytest.approx(0.0)
    with pytest.raises(ContractError):
        overall_qoe([])


def test_variance_examples():
    assert variance_comm([30, 30, 30]) == 0.0
    assert variance_comm([10, 20, 30]) == 100.0
    assert variance_comm([3.0, 7.0]) == pytest.approx((3 - 7) ** 2 / 2)
    assert variance_comp([0.2, 0.2, 0.2]) == 0.0
    assert variance_comp([0.1, 0.3]) == pytest.approx(0.02, abs=1e-15)
    with pytest.raises(ContractError):
        variance_comm([1.0])


@given(st.lists(st.floats(0, 100), min_size=2, max_size=8))
def test_variance_properties(xs):
    v = variance_comm(xs)
    assert v >= 0
    assert v == pytest.approx(variance_comm(list(reversed(xs))), abs=1e-9)
    if len(set(xs)) == 1:
        assert v == 0


def test_reward_examples():
    assert abs(reward(1.0, 0.5, 0.5, RW) - 1.4) < 1e-12
    assert reward(3.0, 0.0, 0.0, RW) == 6.0
    assert reward(0.0, 1.0, 0.0, RW) == -0.6


def test_utilization_examples():
    assert utilization([50, 125, 125], 300, [0.1], 0.8)[0] == 1.0
    assert utilization([10, 10, 10], 300, [0.1], 0.8)[0] == pytest.approx(0.1)
    assert utilization([1], 300, [0.2, 0.2, 0.2], 0.8)[1] == pytest.approx(0.75)
    with pytest.raises(DomainError):
        utilization([1], 0, [1], 1)


def test_normalize_series_examples():
    assert normalize_series([1, 2, 3]) == [0.0, 0.5, 1.0]
    assert normalize_series([5, 5]) == [0.0, 0.0]
    assert normalize_series([0, 1]) == [0.0, 1.0]


def test_monotonicity():
    ys = np.linspace(5, 100, 20)
    assert np.all(np.diff(scene_quality(ys, 5.0)) > 0)
    assert np.all(np.diff(latency_penalty(np.linspace(0, 100, 20), 20.0)) > 0)


def test_qoe_vector_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        y, f, l, p = rng.uniform(1, 100, 3), rng.uniform(0, 60, 3), rng.uniform(0, 100, 3), rng.uniform(1, 100, 3)
        got = qoe_vector(y, f, l, p, W)
        exp = [qoe_user(*args) for args in zip(y, f, l, p)]
        assert np.max(np.abs(got - exp)) < 1e-12


def test_step_metrics_matches_oracle_on_env():
    cfg = EnvConfig()
    env, _ = reset(cfg, 3)
    rng = np.random.default_rng(3)
    for _ in range(40):
        out = env.step_raw(rng.uniform(-1, 1, (3, 2)))
        m = step_metrics(out, W, RW, cfg)
        exp = step_reward(out.received, out.fps_received, out.latency, out.prev_received, out.granted_cpu)
        assert abs(m.reward - exp) < 1e-12
        assert m.v_comm == pytest.approx(sample_var(list(out.received)), abs=1e-12)
        assert 0 <= m.util_comm <= 1 and 0 <= m.util_comp <= 1


def test_single_user_metrics_have_zero_variance():
    cfg = EnvConfig(n_users=1)
    env, _ = reset(cfg, 0)
    m = step_metrics(env.step([50.0], [0.5]), W, RW, cfg)
    assert m.v_comm == 0.0 and m.v_comp == 0.0
