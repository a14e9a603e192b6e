import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from landfill.ode import (DomainError, EventFunction, EventKind, IntegrationError, IntegratorConfig,
                          SingularityError, integrate, integrate_in_s1)


def decay(t, y):
    return -0.7 * y


def oscillator(t, y):
    return np.array([y[1], -y[0]])


@pytest.mark.parametrize("method", ["dop853", "rk45"])
def test_exponential_decay(method):
    cfg = IntegratorConfig(rel_tol=1e-10, abs_tol=1e-13, method=method)
    sol, ev = integrate(decay, [2.0], (0.0, 5.0), cfg)
    assert not ev and sol.status == "finished"
    assert sol.y_final[0] == pytest.approx(2.0 * math.exp(-3.5), rel=1e-8)


def test_dense_output_between_steps():
    sol, _ = integrate(oscillator, [0.0, 1.0], (0.0, 10.0))
    ts = np.linspace(0.0, 10.0, 97)
    assert np.max(np.abs(sol(ts)[:, 0] - np.sin(ts))) < 1e-8


def test_backward_integration():
    sol, _ = integrate(decay, [1.0], (3.0, 0.0))
    assert sol.t_final == 0.0
    assert sol.y_final[0] == pytest.approx(math.exp(0.7 * 3.0), rel=1e-9)
    assert sol(1.5)[0] == pytest.approx(math.exp(0.7 * 1.5), rel=1e-8)


def test_out_of_span_evaluation():
    sol, _ = integrate(decay, [1.0], (0.0, 1.0))
    with pytest.raises(ValueError):
        sol(2.0)


@settings(max_examples=40, deadline=None)
@given(y0=st.floats(-5, -0.1), c=st.floats(0.1, 5), level=st.floats(-0.05, 3))
def test_event_time_linear(y0, c, level):
    ev = EventFunction(lambda t, y: y[0] - level, EventKind.HITS_TARGET_EDGE)
    sol, found = integrate(lambda t, y: np.array([c]), [y0], (0.0, 100.0), events=[ev])
    t_exact = (level - y0) / c
    assert found and found[0].kind == EventKind.HITS_TARGET_EDGE
    assert found[0].time == pytest.approx(t_exact, rel=1e-10, abs=1e-12)
    assert sol.t_final == found[0].time


def test_event_direction_filter():
    # sin(t) crosses zero downward first at pi, upward at 2 pi; g(t0) = 0 is not a crossing
    up = EventFunction(lambda t, y: y[0], direction=+1)
    _, found = integrate(oscillator, [0.0, 1.0], (0.0, 10.0), events=[up])
    assert found[0].time == pytest.approx(2 * math.pi, rel=1e-9)
    down = EventFunction(lambda t, y: y[0], direction=-1)
    _, found = integrate(oscillator, [0.0, 1.0], (0.0, 10.0), events=[down])
    assert found[0].time == pytest.approx(math.pi, rel=1e-9)


def test_accept_filter_and_non_terminal():
    # the first zero of cos (y[1]) at pi/2 is rejected because sin > 0 there
    ev = EventFunction(lambda t, y: y[1], accept=lambda y: y[0] < 0)
    _, found = integrate(oscillator, [0.0, 1.0], (0.0, 10.0), events=[ev])
    assert found[0].time == pytest.approx(1.5 * math.pi, rel=1e-9)
    tick = EventFunction(lambda t, y: y[0], terminal=False, name="zero")
    sol, found = integrate(oscillator, [0.0, 1.0], (0.0, 10.0), events=[tick])
    assert [round(e.time, 6) for e in found] == [round(math.pi, 6), round(2 * math.pi, 6), round(3 * math.pi, 6)]
    assert sol.t_final == 10.0


def test_rk4_fourth_order():
    errs = []
    for h in (0.2, 0.1, 0.05):
        sol, _ = integrate(oscillator, [0.0, 1.0], (0.0, 4.0), IntegratorConfig(method="rk4", step=h))
        errs.append(abs(sol.y_final[0] - math.sin(4.0)))
    orders = [math.log2(errs[i] / errs[i + 1]) for i in range(2)]
    assert all(3.7 < p < 4.3 for p in orders)


def test_domain_violation():
    with pytest.raises(DomainError):
        integrate(lambda t, y: np.array([1.0]), [0.0], (0.0, 5.0), domain=lambda y: y[0] < 1.0)


def test_step_budget():
    with pytest.raises(IntegrationError):
        integrate(oscillator, [0.0, 1.0], (0.0, 100.0), IntegratorConfig(max_steps=3))


def test_s1_parameterisation_guard():
    with pytest.raises(SingularityError):
        integrate_in_s1(lambda s, y: y, [1.0], (1.0, 0.0))
    sol, _ = integrate_in_s1(lambda s, y: y / s, [1.0], (1.0, 0.5), floor=0.1)
    assert sol.y_final[0] == pytest.approx(0.5, rel=1e-9)


@pytest.mark.parametrize("kw", [dict(rel_tol=0.0), dict(max_step=-1.0), dict(method="euler"),
                                dict(method="rk4")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        IntegratorConfig(**kw)
