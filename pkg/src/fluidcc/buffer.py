"""FIFO buffer element.

The queue integrates its aggregate input and is served at capacity ``c``
whenever it is congested (nonempty, or receiving more than ``c``).  Two
output-separation laws are available:

``"flow"``
    Each class leaves in the proportions in which it *entered*, one queuing
    delay earlier: ``c * phi_l(g(t)) / sum_j phi_j(g(t))`` with ``g`` the
    inverse of ``f(t) = t + q(t)/c``.
``"pseudo_queue"``
    Each class leaves in proportion to its current share of the backlog,
    ``c * q_l(t) / sum_k q_k(t)``.

Within a solver step all input rates are constant, so the queue is exactly
piecewise linear in time.  The emptying instant is computed in closed form and
stored as an extra breakpoint of ``f``; ``f`` is then exactly the linear
interpolant of its breakpoints and ``g`` is obtained by inverting it.  The
flow-model class outputs over a step are the class input counts over the entry
interval ``[g(t0), g(t1)]``, which is the step integral of the ratio formula
and conserves packets class by class.
"""

from __future__ import annotations

import logging
import math
from bisect import bisect_left
from typing import Mapping, Sequence

from .errors import DegenerateRatio, HistoryUnderrun, SolverError
from .signal import FlowSignal

__all__ = [
    "BufferState",
    "OUTPUT_MODELS",
    "aggregate_output_rate",
    "step_queue",
    "forward_delay",
    "backward_delay",
    "split_output_flows_flow_model",
    "split_output_flows_pseudo_queue",
    "congestion_condition",
    "g_prime",
    "f_prime",
    "tau_g_prime",
]

log = logging.getLogger(__name__)

OUTPUT_MODELS = ("flow", "pseudo_queue")

# Relative size below which a total entry-interval count is treated as zero.
_RATIO_EPS = 1e-12


class BufferState:
    """State of one FIFO buffer, advanced one solver step at a time.

    Parameters
    ----------
    id : str
    capacity : float
        Service rate in packets/second.
    classes : sequence of str
        Class identifiers of the input flows.
    q0 : float
        Initial queue size in packets.
    initial_rates : mapping, optional
        Per-class input rates before ``t0`` (constant history).  The queue is
        assumed to have held ``q0`` over that history.
    model : {"flow", "pseudo_queue"}
    """

    def __init__(self, id: str, capacity: float, classes: Sequence[str], *, q0: float = 0.0, t0: float = 0.0,
                 initial_rates: Mapping[str, float] | None = None, model: str = "flow"):
        if not capacity > 0:
            raise ValueError("capacity must be > 0")
        if q0 < 0:
            raise ValueError("initial queue must be >= 0")
        if model not in OUTPUT_MODELS:
            raise ValueError(f"unknown output model {model!r}; expected one of {OUTPUT_MODELS}")
        self.id = id
        self.c = float(capacity)
        self.classes = list(classes)
        self.model = model
        self.q = float(q0)
        self.t = float(t0)
        rates = {k: float((initial_rates or {}).get(k, 0.0)) for k in self.classes}
        self.class_inputs = {k: FlowSignal(t0, rates[k], name=f"{id}-.{k}") for k in self.classes}
        self.tau_pre = self.q / self.c
        out_rates = self._pre_output_rates(rates)
        self.class_outputs = {k: FlowSignal(t0, out_rates[k], name=f"{id}+.{k}") for k in self.classes}
        # forward map breakpoints: entry time -> exit time
        self.f_entry = [self.t]
        self.f_exit = [self.t + self.tau_pre]
        self._g_prev = self.t - self.tau_pre
        total = sum(rates.values())
        if self.q > 0 and total > 0:
            self.class_backlog0 = {k: self.q * rates[k] / total for k in self.classes}
        else:
            self.class_backlog0 = {k: (self.q / len(self.classes) if self.q > 0 else 0.0) for k in self.classes}
        self.pseudo_class_queues: dict[str, float] | None = None
        if model == "pseudo_queue":
            self.pseudo_class_queues = dict(self.class_backlog0)
        self.congested = self.q > 0 or sum(rates.values()) > self.c
        self.last_in = sum(rates.values())
        self.last_out = min(self.c, self.last_in) if self.q == 0 else self.c
        self.warned_flat = False
        self.last_empty_time = None

    def _pre_output_rates(self, rates: Mapping[str, float]) -> dict[str, float]:
        total = sum(rates.values())
        if (self.q > 0 or total > self.c) and total > 0:
            return {k: self.c * r / total for k, r in rates.items()}
        return dict(rates)

    @property
    def tau(self) -> float:
        return self.q / self.c

    # -- stepping -----------------------------------------------------------

    def step(self, t1: float, amounts: Mapping[str, float]) -> dict[str, float]:
        """Advance to ``t1`` given the packets each class brings in over the step.

        Returns the packets each class sends out over the step.
        """
        t0 = self.t
        dt = t1 - t0
        if not dt > 0:
            raise SolverError(f"buffer {self.id}: non-positive step {dt!r}")
        c = self.c
        total_in = 0.0
        for k in self.classes:
            a = amounts.get(k, 0.0)
            total_in += a
            self.class_inputs[k].append_amount(t1, a)
        A = total_in / dt
        q0 = self.q
        cand = q0 + total_in - c * dt
        t_empty = None
        if q0 > 0.0 or A > c:
            congested = True
            if cand >= 0.0:
                q1 = cand
                out_total = c * dt
            else:
                t_empty = t0 + q0 / (c - A)
                q1 = 0.0
                out_total = q0 + total_in
        else:
            congested = False
            q1 = 0.0
            out_total = total_in
        if q1 < 0.0:
            raise SolverError(f"buffer {self.id}: negative queue {q1!r} after step")

        fe, fx = self.f_entry, self.f_exit
        if t_empty is not None and t0 < t_empty < t1:
            fe.append(t_empty)
            fx.append(t_empty)
        fe.append(t1)
        fx.append(t1 + q1 / c)

        if self.model == "flow":
            outs = self._split_flow(t1, out_total)
        else:
            outs = self._split_pseudo(dt, amounts, total_in, q0, t_empty, t0)
        for k in self.classes:
            self.class_outputs[k].append_amount(t1, outs[k])

        self.q = q1
        self.t = t1
        self.last_empty_time = t_empty if (t_empty is not None and t_empty < t1) else (t1 if q0 > 0 and q1 == 0 else None)
        self.congested = congested
        self.last_in = A
        self.last_out = out_total / dt
        return outs

    def _split_flow(self, t1: float, out_total: float) -> dict[str, float]:
        x1 = self.g(t1)
        x0 = self._g_prev
        self._g_prev = x1
        deltas = {}
        s = 0.0
        for k in self.classes:
            sig = self.class_inputs[k]
            d = sig.cumulative(x1) - sig.cumulative(x0)
            deltas[k] = d
            s += d
        if out_total <= 0.0:
            return {k: 0.0 for k in self.classes}
        if s > _RATIO_EPS * out_total:
            scale = out_total / s
            return {k: d * scale for k, d in deltas.items()}
        # entry interval carries (numerically) no input: share by left limits
        rates = {k: self.class_inputs[k].sample(x1) for k in self.classes}
        r = sum(rates.values())
        if r <= 0.0:
            raise DegenerateRatio(f"buffer {self.id}: congested with no input at entry time {x1!r}")
        if not self.warned_flat:
            log.warning("buffer %s: zero-measure input gap at entry time %.9g; using left-limit shares", self.id, x1)
            self.warned_flat = True
        return {k: out_total * v / r for k, v in rates.items()}

    def _split_pseudo(self, dt, amounts, total_in, q0, t_empty, t0) -> dict[str, float]:
        pq = self.pseudo_class_queues
        assert pq is not None
        c = self.c
        A = total_in / dt
        if not (q0 > 0.0 or A > c):
            # pass-through below capacity: the aggregate law forwards the input
            for k in self.classes:
                pq[k] = 0.0
            return {k: amounts.get(k, 0.0) for k in self.classes}
        h = dt if t_empty is None else t_empty - t0
        h = min(max(h, 0.0), dt)
        a = {k: amounts.get(k, 0.0) / dt for k in self.classes}
        if q0 > 0.0:
            x0 = {k: pq[k] / q0 for k in self.classes}
        else:
            x0 = {k: a[k] / A for k in self.classes}
        beta = A - c
        q1 = max(q0 + beta * h, 0.0)
        if A > 0.0:
            p = {k: a[k] / A for k in self.classes}
            if q0 <= 0.0 or q1 <= 0.0:
                decay = 0.0
            elif beta == 0.0:
                decay = math.exp(-A * h / q0)
            else:
                decay = math.exp(-A * math.log1p(beta * h / q0) / beta)
            x1 = {k: p[k] + (x0[k] - p[k]) * decay for k in self.classes}
        else:
            x1 = x0
        outs = {}
        for k in self.classes:
            new = x1[k] * q1
            outs[k] = max(pq[k] + a[k] * h - new, 0.0)
            pq[k] = new
        if t_empty is not None:
            rest = dt - h
            for k in self.classes:
                outs[k] += a[k] * rest
                pq[k] = 0.0
        # rounding: make the class outputs add up to the aggregate exactly
        out_total = q0 + total_in - (q1 if t_empty is None else 0.0)
        s = sum(outs.values())
        if s > 0:
            scale = out_total / s
            outs = {k: v * scale for k, v in outs.items()}
        return outs

    # -- delay maps ---------------------------------------------------------

    # earliest entry time still retained; -inf while the constant prehistory applies
    f_horizon = -math.inf

    def f(self, t: float) -> float:
        """Forward delay map: exit time of data entering at ``t``."""
        fe = self.f_entry
        if t <= fe[0]:
            if t == fe[0]:
                return self.f_exit[0]
            if self.f_horizon > -math.inf:
                raise HistoryUnderrun(f"buffer {self.id}: f({t!r}) before retained history")
            return t + self.tau_pre
        if t > fe[-1]:
            raise HistoryUnderrun(f"buffer {self.id}: f({t!r}) beyond simulated time {fe[-1]!r}")
        j = bisect_left(fe, t)
        e0, e1 = fe[j - 1], fe[j]
        x0, x1 = self.f_exit[j - 1], self.f_exit[j]
        return x0 + (x1 - x0) * (t - e0) / (e1 - e0)

    def g(self, x: float) -> float:
        """Backward delay map: entry time of data leaving at ``x``."""
        fx = self.f_exit
        if x <= fx[0]:
            if self.f_horizon > -math.inf:
                if x < fx[0]:
                    raise HistoryUnderrun(f"buffer {self.id}: g({x!r}) before retained history")
                return self.f_entry[0]
            return x - self.tau_pre
        if x > fx[-1]:
            raise HistoryUnderrun(f"buffer {self.id}: g({x!r}) beyond known exit times {fx[-1]!r}")
        j = bisect_left(fx, x)
        x0, x1 = fx[j - 1], fx[j]
        e0, e1 = self.f_entry[j - 1], self.f_entry[j]
        return e0 + (e1 - e0) * (x - x0) / (x1 - x0)

    def tau_at(self, t: float) -> float:
        """Queuing delay at a past time ``t``."""
        return self.f(t) - t

    def q_at(self, t: float) -> float:
        q = self.c * (self.f(t) - t)
        # interpolation round-off on identity segments
        return q if q > 1e-9 else 0.0

    def class_backlog(self, k: str) -> float:
        """Packets of class ``k`` currently queued (input minus output so far)."""
        return self.class_backlog0[k] + self.class_inputs[k].cumulative(self.t) - self.class_outputs[k].cumulative(self.t)

    def input_rate(self, t: float) -> float:
        return sum(sig.sample(t) for sig in self.class_inputs.values())

    def prune(self, new_horizon: float) -> None:
        """Drop history older than ``new_horizon`` from signals and the delay map."""
        for sig in self.class_inputs.values():
            if new_horizon > sig.horizon:
                sig.prune(min(new_horizon, sig.now))
        for sig in self.class_outputs.values():
            if new_horizon > sig.horizon:
                sig.prune(min(new_horizon, sig.now))
        fe = self.f_entry
        j = bisect_left(fe, new_horizon) - 1
        if j > 0:
            del fe[:j]
            del self.f_exit[:j]
        self.f_horizon = max(self.f_horizon, fe[0])


# -- pointwise operations ------------------------------------------------------


def congestion_condition(state: BufferState, t: float) -> bool:
    """``(q(t) > 0) or (sum of inputs at t > c)``."""
    return state.q_at(t) > 0.0 or state.input_rate(t) > state.c


def aggregate_output_rate(state: BufferState, t: float) -> float:
    if congestion_condition(state, t):
        return state.c
    return state.input_rate(t)


def forward_delay(state: BufferState, t: float) -> float:
    return state.f(t)


def backward_delay(state: BufferState, t: float) -> float:
    return state.g(t)


def split_output_flows_flow_model(state: BufferState, t: float) -> dict[str, float]:
    """Per-class output rates at ``t`` from the delayed input ratios."""
    if not congestion_condition(state, t):
        return {k: state.class_inputs[k].sample(t) for k in state.classes}
    s = state.g(t)
    rates = {k: state.class_inputs[k].sample(s) for k in state.classes}
    total = sum(rates.values())
    if total <= 0.0:
        raise DegenerateRatio(f"buffer {state.id}: congested at {t!r} with no input at entry time {s!r}")
    return {k: state.c * r / total for k, r in rates.items()}


def split_output_flows_pseudo_queue(state: BufferState, t: float | None = None) -> dict[str, float]:
    """Per-class output rates from the current class backlogs.

    The class backlogs are only kept for the current time, so ``t`` is
    accepted for symmetry and must be ``None`` or the state's time.
    """
    if t is not None and abs(t - state.t) > 1e-12 * max(1.0, abs(t)):
        raise ValueError("pseudo-queue backlogs are only available at the current time")
    pq = state.pseudo_class_queues
    if pq is None:
        raise ValueError(f"buffer {state.id} does not run the pseudo-queue model")
    total = sum(pq.values())
    if state.q > 0.0 and total > 0.0:
        return {k: pq[k] * state.c / total for k in state.classes}
    return {k: 0.0 for k in state.classes}


def step_queue(state: BufferState, t: float, dt: float, inputs: Mapping[str, object] | None = None) -> BufferState:
    """Advance ``state`` from ``t`` to ``t + dt``.

    ``inputs`` maps each class to either a signal (anything with
    ``integrate``) or a constant rate.  Missing classes bring nothing.
    """
    if not dt > 0:
        raise ValueError("dt must be > 0")
    if abs(t - state.t) > 1e-9 * max(1.0, abs(t)):
        raise ValueError(f"state is at t={state.t!r}, not {t!r}")
    amounts = {}
    for k in state.classes:
        src = (inputs or {}).get(k, 0.0)
        if hasattr(src, "integrate"):
            amounts[k] = src.integrate(t, t + dt)
        else:
            amounts[k] = float(src) * dt
    state.step(t + dt, amounts)
    return state


def g_prime(state: BufferState, t: float) -> float:
    """Slope of the backward map at ``t``: ``c / sum phi(g(t))`` when congested, else 1."""
    s = state.g(t)
    if congestion_condition(state, t):
        total = state.input_rate(s)
        return math.inf if total <= 0 else state.c / total
    return 1.0


def f_prime(state: BufferState, t: float) -> float:
    """Slope of the forward map at ``t``: ``sum phi(t) / c`` when congested, else 1."""
    if congestion_condition(state, t):
        return state.input_rate(t) / state.c
    return 1.0


def tau_g_prime(state: BufferState, t: float) -> float:
    """Slope of the backward-observed delay ``tau(g(t))``; zero when uncongested."""
    if congestion_condition(state, t):
        total = state.input_rate(state.g(t))
        return -math.inf if total <= 0 else 1.0 - state.c / total
    return 0.0
