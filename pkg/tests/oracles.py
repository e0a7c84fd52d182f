"""Independent straight-line reference implementations used by the tests."""
from __future__ import annotations

import math
from fractions import Fraction


def qoe_user(y, f, l, prev_y, alpha=1.0, beta=0.2, gamma_l=0.05, delta=0.5,
             y_min=5.0, l_min=20.0, f_target=60.0):
    q = math.log(max(y, y_min) / y_min)
    q_prev = math.log(max(prev_y, y_min) / y_min)
    return (alpha * q - beta * abs(f - f_target) - gamma_l * math.exp(l / l_min)
            - delta * abs(q - q_prev))


def sample_var(xs):
    """Exact mean-deviation form, rounded once at the end."""
    fx = [Fraction(float(x)) for x in xs]
    n = len(fx)
    m = sum(fx, Fraction(0)) / n
    return float(sum(((x - m) ** 2 for x in fx), Fraction(0)) / (n - 1))


def step_reward(ys, fs, ls, prev_ys, gs, w=(2.0, -0.6, -0.6), **qoe_kw):
    q_t = sum(qoe_user(y, f, l, p, **qoe_kw) for y, f, l, p in zip(ys, fs, ls, prev_ys))
    return w[0] * q_t + w[1] * sample_var(ys) + w[2] * sample_var(gs)


def progressive_filling(demands, capacity):
    """Brute-force max-min fairness: raise every unfrozen user together.

    Exact rational arithmetic; each round freezes users whose demand is
    reached by the current equal increment.
    """
    d = [Fraction(float(x)) for x in demands]
    cap = Fraction(float(capacity))
    alloc = [Fraction(0)] * len(d)
    active = set(range(len(d)))
    remaining = cap
    while active and remaining > 0:
        share = remaining / len(active)
        need = min(d[i] - alloc[i] for i in active)
        inc = min(share, need)
        for i in active:
            alloc[i] += inc
        remaining -= inc * len(active)
        active = {i for i in active if alloc[i] < d[i]}
    return alloc


def round_down(x: Fraction) -> float:
    f = float(x)
    if Fraction(f) > x:
        f = math.nextafter(f, -math.inf)
    return f
