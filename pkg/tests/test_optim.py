import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dnetloc.netcore import Param
from dnetloc.optim import Adam, NonFiniteGradient, PlateauPolicy, adam_step, plateau_update


def scalar_param(value=1.0, grad=0.0):
    p = Param("x", np.array([value]))
    p.grad[0] = grad
    return p


@given(st.floats(1e-6, 1e3) | st.floats(-1e3, -1e-6))
def test_first_step_closed_form(g):
    p = scalar_param(0.0, g)
    Adam([p], lr=1e-3).step()
    # bias correction gives m_hat = g and v_hat = g^2 exactly
    expected = -1e-3 * g / (abs(g) + 1e-8)
    assert abs(p.value[0] - expected) <= 1e-15
    if abs(g) >= 1e-2:
        assert abs(abs(p.value[0]) - 1e-3) <= 1e-3 * 1e-6


def test_zero_gradient_no_change():
    p = scalar_param(0.7, 0.0)
    opt = Adam([p])
    for _ in range(3):
        opt.step()
    assert p.value[0] == 0.7


def reference_adam(theta, grad_fn, steps, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    trace = []
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        theta = theta - lr * mhat / (math.sqrt(vhat) + eps)
        trace.append(theta)
    return trace


def test_three_steps_on_quadratic():
    # f(x) = 1.5 (x - 2)^2
    grad = lambda x: 3.0 * (x - 2.0)
    p = scalar_param(0.5)
    opt = Adam([p], lr=0.1)
    ours = []
    for _ in range(3):
        p.grad[0] = grad(p.value[0])
        adam_step([p], opt)
        ours.append(p.value[0])
    ref = reference_adam(0.5, grad, 3, lr=0.1)
    assert all(abs(a - b) < 1e-12 for a, b in zip(ours, ref))
    assert opt.t == 3


def test_nonfinite_gradient_rejected():
    a, b = scalar_param(1.0, 0.5), scalar_param(2.0, float("nan"))
    b.name = "y"
    opt = Adam([a, b])
    with pytest.raises(NonFiniteGradient, match="y"):
        opt.step()
    assert a.value[0] == 1.0 and opt.t == 0 and opt.m["x"][0] == 0.0


def test_state_roundtrip():
    p = scalar_param(1.0, 0.3)
    opt = Adam([p], lr=0.01)
    opt.step()
    arrays, meta = opt.state_dict()
    q = scalar_param(1.0)
    other = Adam([q])
    other.load_state_dict({k: v.copy() for k, v in arrays.items()}, meta)
    for o in (opt, other):
        o.params[0].value[0] = 0.0
        o.params[0].grad[0] = -0.2
        o.step()
    assert p.value.tobytes() == q.value.tobytes()


def test_moments_nonnegative():
    rng = np.random.default_rng(0)
    p = Param("w", rng.normal(size=10))
    opt = Adam([p])
    for _ in range(20):
        p.grad[...] = rng.normal(size=10)
        opt.step()
    assert np.all(opt.v["w"] >= 0)


# ---------------------------------------------------------------- plateau


def run(losses, **kw):
    pol = PlateauPolicy(**kw)
    return [plateau_update(pol, x) for x in losses]


def test_plateau_improving():
    assert run([1.0, 0.9, 0.8], patience=3) == [1e-3] * 3


def test_plateau_flat_reduces_after_fourth():
    lrs = run([1.0, 1.0, 1.0, 1.0], patience=3, min_delta=1e-4)
    assert lrs[:3] == [1e-3] * 3
    assert lrs[3] == pytest.approx(1e-4, rel=1e-15)


def test_plateau_small_improvement_counts_as_bad():
    lrs = run([1.0, 0.99995, 0.99992, 0.99991], patience=3, min_delta=1e-4)
    assert lrs[3] < lrs[2]


def test_plateau_floor():
    pol = PlateauPolicy(lr=1e-6, min_lr=1e-6, patience=1)
    for x in [1.0, 1.0, 1.0, 1.0]:
        assert pol.update(x) == 1e-6


def test_plateau_rejects_nan():
    with pytest.raises(ValueError):
        PlateauPolicy().update(float("nan"))


@given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=40), st.integers(1, 5))
def test_lr_non_increasing_by_factor(losses, patience):
    lrs = [1e-3] + run(losses, patience=patience)
    for a, b in zip(lrs, lrs[1:]):
        assert b <= a
        assert b == a or b == max(a * 0.1, 1e-6)
        assert b >= 1e-6
