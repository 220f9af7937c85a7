import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from fluidcc.buffer import (BufferState, aggregate_output_rate, congestion_condition, f_prime, g_prime,
                            split_output_flows_flow_model, split_output_flows_pseudo_queue, step_queue, tau_g_prime)
from fluidcc.errors import DegenerateRatio, HistoryUnderrun, SolverError


def run_constant(rates, c=100.0, q0=0.0, dt=0.01, t_end=1.0, model="flow", initial=None):
    b = BufferState("b", c, list(rates), q0=q0, initial_rates=initial if initial is not None else rates, model=model)
    for k in range(int(round(t_end / dt))):
        b.step((k + 1) * dt, {cls: r * dt for cls, r in rates.items()})
    return b


def test_overloaded_from_empty_matches_closed_form():
    # input 150 into capacity 100: q = 50 t, f(t) = 1.5 t, g(x) = x / 1.5
    b = run_constant({"a": 60.0, "b": 90.0}, initial={"a": 0.0, "b": 0.0})
    assert b.q == pytest.approx(50.0)
    assert b.f(0.4) == pytest.approx(0.6)
    assert b.g(0.6) == pytest.approx(0.4)
    assert b.tau_at(0.8) == pytest.approx(0.4)
    outs = split_output_flows_flow_model(b, 1.0)
    assert outs["a"] == pytest.approx(40.0) and outs["b"] == pytest.approx(60.0)
    assert f_prime(b, 0.5) == pytest.approx(1.5)
    assert g_prime(b, 0.9) == pytest.approx(1 / 1.5)
    assert tau_g_prime(b, 0.9) == pytest.approx(1 - 1 / 1.5)


def test_emptying_time_is_exact():
    # 30 packets drain at 100 - 40 = 60 per second: empty at 0.5 s, inside a step
    b = BufferState("b", 100.0, ["a"], q0=30.0, initial_rates={"a": 40.0})
    for k in range(10):
        b.step((k + 1) * 0.07, {"a": 40.0 * 0.07})
        if b.last_empty_time is not None:
            break
    assert b.last_empty_time == pytest.approx(0.5, abs=1e-12)
    assert b.q == 0.0
    assert 0.5 in [pytest.approx(x) for x in b.f_entry]
    assert b.f(0.5) == pytest.approx(0.5)
    assert not congestion_condition(b, b.t)
    assert aggregate_output_rate(b, b.t) == pytest.approx(40.0)


def test_uncongested_is_identity():
    b = run_constant({"a": 30.0, "b": 20.0})
    assert b.q == 0.0
    for t in (0.1, 0.55, 0.99):
        assert b.f(t) == pytest.approx(t) and b.g(t) == pytest.approx(t)
    assert g_prime(b, 0.5) == 1.0 and f_prime(b, 0.5) == 1.0 and tau_g_prime(b, 0.5) == 0.0
    assert split_output_flows_flow_model(b, 0.5) == pytest.approx({"a": 30.0, "b": 20.0})


def test_flow_model_output_is_delayed_input_mix():
    # class a stops at t=0.5; its packets still leave until f(0.5)
    c = 100.0
    b = BufferState("b", c, ["a", "b"], initial_rates={"a": 0.0, "b": 0.0})
    dt = 0.001
    for k in range(2000):
        t1 = (k + 1) * dt
        a = 100.0 if t1 <= 0.5 else 0.0
        b.step(t1, {"a": a * dt, "b": 50.0 * dt})
    t_exit = b.f(0.5)
    assert t_exit == pytest.approx(0.75)
    assert b.class_outputs["a"].cumulative(t_exit) == pytest.approx(50.0, abs=1e-9)
    assert b.class_outputs["a"].sample(t_exit + 0.01) == 0.0


def test_pseudo_queue_matches_ode():
    # classes with backlog shares 0.8/0.2 and input shares 0.25/0.75
    c, q0 = 100.0, 40.0
    rates = {"a": 30.0, "b": 90.0}
    b = BufferState("b", c, ["a", "b"], q0=q0, initial_rates={"a": 80.0, "b": 20.0}, model="pseudo_queue")
    assert b.pseudo_class_queues["a"] == pytest.approx(32.0)
    dt = 0.01
    for k in range(100):
        b.step((k + 1) * dt, {k_: r * dt for k_, r in rates.items()})

    def rhs(t, y):
        q = y.sum()
        return [rates["a"] - c * y[0] / q, rates["b"] - c * y[1] / q]

    ref = solve_ivp(rhs, (0, 1.0), [32.0, 8.0], rtol=1e-11, atol=1e-11).y[:, -1]
    assert b.pseudo_class_queues["a"] == pytest.approx(ref[0], rel=1e-8)
    assert b.pseudo_class_queues["b"] == pytest.approx(ref[1], rel=1e-8)
    outs = split_output_flows_pseudo_queue(b)
    assert sum(outs.values()) == pytest.approx(c)
    with pytest.raises(ValueError):
        split_output_flows_pseudo_queue(b, 0.2)


def test_pseudo_queue_passes_through_below_capacity():
    b = run_constant({"a": 30.0, "b": 20.0}, model="pseudo_queue")
    assert b.class_outputs["a"].sample(0.5) == pytest.approx(30.0)
    assert split_output_flows_pseudo_queue(b) == {"a": 0.0, "b": 0.0}


def test_degenerate_ratio():
    b = BufferState("b", 10.0, ["a"], q0=5.0, initial_rates={"a": 0.0})
    with pytest.raises(DegenerateRatio):
        b.step(0.01, {"a": 0.0})


def test_step_queue_and_history():
    b = BufferState("b", 10.0, ["a"])
    step_queue(b, 0.0, 0.1, {"a": 20.0})
    assert b.q == pytest.approx(1.0)
    with pytest.raises(ValueError):
        step_queue(b, 0.5, 0.1)
    with pytest.raises(HistoryUnderrun):
        b.g(5.0)
    with pytest.raises(SolverError):
        b.step(0.1, {})
    with pytest.raises(ValueError):
        BufferState("b", 0.0, ["a"])


def test_prune_keeps_recent_maps():
    b = run_constant({"a": 150.0}, initial={"a": 0.0}, t_end=2.0)
    ref = b.g(1.9)
    b.prune(1.0)
    assert b.g(1.9) == pytest.approx(ref)
    with pytest.raises(HistoryUnderrun):
        b.f(0.2)


steps = st.lists(st.tuples(st.floats(0, 300), st.floats(0, 300)), min_size=5, max_size=80)


@settings(max_examples=60, deadline=None)
@given(steps, st.floats(0.0, 50.0), st.sampled_from(["flow", "pseudo_queue"]))
def test_buffer_invariants(amounts, q0, model):
    c, dt = 100.0, 0.01
    # a prehistory that is consistent with q0: served at capacity
    b = BufferState("b", c, ["a", "b"], q0=q0, initial_rates={"a": 40.0, "b": 60.0}, model=model)
    total_in = total_out = 0.0
    for k, (ra, rb) in enumerate(amounts):
        outs = b.step((k + 1) * dt, {"a": ra * dt, "b": rb * dt})
        total_in += (ra + rb) * dt
        total_out += sum(outs.values())
        assert b.q >= 0.0
        assert sum(outs.values()) <= c * dt * (1 + 1e-12) + 1e-12 or not b.congested
        assert all(v >= 0.0 for v in outs.values())
    assert q0 + total_in - total_out == pytest.approx(b.q, abs=1e-8)
    fe, fx = np.array(b.f_entry), np.array(b.f_exit)
    assert np.all(np.diff(fx) >= -1e-12)
    for x in np.linspace(fx[0], fx[-1], 7):
        assert b.f(b.g(x)) == pytest.approx(x, abs=1e-9)
    if model == "flow":
        for k in ("a", "b"):
            assert b.class_backlog(k) >= -1e-8
        assert sum(b.class_backlog(k) for k in ("a", "b")) == pytest.approx(b.q, abs=1e-8)
        # FIFO at step boundaries: what has left by t entered before g(t)
        for t in fe[1::3]:
            if t in b.class_inputs["a"]._times:
                for k in ("a", "b"):
                    n_in = b.class_backlog0[k] + b.class_inputs[k].cumulative(b.g(t))
                    assert b.class_outputs[k].cumulative(t) == pytest.approx(n_in, abs=1e-7)
