"""Window-based sources with ACK clocking and an ACK buffer.

A user keeps outstanding the number of packets given by its congestion
window ``w``.  While the ACK buffer ``pi`` is empty and the window is not
shrinking faster than ACKs arrive, the user sends at ``dw/dt + ack rate``.
Otherwise it stops, and ``pi`` (a non-positive count) absorbs ACKs until the
flight size has fallen to the new window.

All quantities are advanced on the solver grid in amounts per step, which
keeps the flight-size balance ``sent - acked`` exact:

    p = pi + (w[k+1] - w[k]) + acked over the step
    p >= 0  ->  send p, pi = 0
    p <  0  ->  send 0, pi = p
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Protocol as _TypingProtocol, Sequence

from .errors import ProtocolError, SolverError
from .signal import FlowSignal

__all__ = [
    "WindowScript",
    "UserState",
    "WindowProtocol",
    "ScriptProtocol",
    "RelaxationProtocol",
    "send_mode",
    "sending_rate",
    "step_ack_buffer",
    "step_user",
    "flight_size",
    "ack_flow",
    "protocol_step",
]

# window steps scheduled at t_s take effect strictly after t_s
STEP_TOL = 1e-9


@dataclass(frozen=True)
class WindowScript:
    """Piecewise-constant window: ``initial`` up to the first step time, then
    each ``(time, window)`` in turn.  Left-continuous, so ``value(t_s)`` is
    still the old window."""

    initial: float
    steps: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        steps = tuple((float(t), float(w)) for t, w in self.steps)
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "initial", float(self.initial))
        if self.initial < 0 or not math.isfinite(self.initial):
            raise ValueError(f"initial window must be finite and >= 0, got {self.initial!r}")
        for (t_a, _), (t_b, _) in zip(steps, steps[1:]):
            if not t_b > t_a:
                raise ValueError("window step times must be strictly increasing")
        for t, w in steps:
            if w < 0 or not math.isfinite(w):
                raise ValueError(f"window at t={t} must be finite and >= 0, got {w!r}")

    def value(self, t: float) -> float:
        w = self.initial
        for s, v in self.steps:
            if not t > s + STEP_TOL:
                break
            w = v
        return w

    @property
    def step_times(self) -> list[float]:
        return [t for t, _ in self.steps]


class WindowProtocol(_TypingProtocol):
    """Hook interface of a congestion-control protocol.

    ``advance`` returns the internal state after one step of length ``dt``
    given the congestion measure ``mu`` (backward-observed queuing delay in
    seconds); ``window`` maps the state to a congestion window in packets.
    Both must be pure functions of their arguments.
    """

    def initial_state(self, w0: float) -> Any: ...

    def advance(self, z: Any, mu: float, t: float, dt: float) -> Any: ...

    def window(self, z: Any, mu: float, t: float) -> float: ...


class ScriptProtocol:
    """Open-loop window script; the internal state is unused."""

    def __init__(self, script: WindowScript):
        self.script = script

    def initial_state(self, w0: float):
        return None

    def advance(self, z, mu, t, dt):
        return z

    def window(self, z, mu, t):
        return self.script.value(t)


class RelaxationProtocol:
    """``dw/dt = gain * (target - w)``; integrated exactly over each step.

    Mainly a reference protocol for testing the hook machinery.
    """

    def __init__(self, target: float, gain: float = 1.0):
        self.target = float(target)
        self.gain = float(gain)

    def initial_state(self, w0: float):
        return float(w0)

    def advance(self, z, mu, t, dt):
        return self.target + (z - self.target) * math.exp(-self.gain * dt)

    def window(self, z, mu, t):
        return z


@dataclass
class UserState:
    """Mutable per-user state owned by the solver.

    ``send_flow`` is the signal at the user's output node; ``ack_flow`` is a
    read-only view of the ACKs arriving at its input node.
    """

    id: str
    w: float
    protocol: Any
    z: Any = None
    pi: float = 0.0
    flight: float = 0.0
    mu: float = 0.0
    send_flow: FlowSignal | None = None
    ack_flow: Any = None
    sent_total: float = 0.0
    acked_total: float = 0.0
    acked_last: float = 0.0
    # (time, kind) pairs: "retain" when pi leaves 0, "resume" when it returns
    events: list = field(default_factory=list)

    @property
    def send_mode(self) -> bool:
        return self.pi == 0.0


def send_mode(pi: float, w_dot: float, ack_rate: float) -> bool:
    """``(pi == 0) and (w_dot + ack_rate >= 0)``."""
    return pi == 0.0 and w_dot + ack_rate >= 0.0


def sending_rate(pi: float, w_dot: float, ack_rate: float) -> float:
    """Pointwise sending law: ``w_dot + ack_rate`` in send mode, else 0."""
    if send_mode(pi, w_dot, ack_rate):
        return w_dot + ack_rate
    return 0.0


def step_ack_buffer(pi: float, dw: float, acked: float, t0: float = 0.0, dt: float = 1.0):
    """Advance the ACK buffer over one step.

    ``dw`` is the window change and ``acked`` the ACKs received during the
    step.  Returns ``(sent, pi_new, t_event)`` where ``t_event`` is the
    localized instant at which the buffer left or re-entered zero (``None``
    if the mode did not change).  Inside the step the window and ACK rates
    are constant, so the crossing is linear.
    """
    if pi > 0.0:
        raise SolverError(f"ACK buffer positive ({pi!r})")
    p = pi + dw + acked
    if p >= 0.0:
        t_event = None
        if pi < 0.0:
            t_event = t0 + dt * (-pi) / (dw + acked)
        return p, 0.0, t_event
    t_event = t0 if pi == 0.0 else None
    return 0.0, p, t_event


def step_user(state: UserState, t0: float, t1: float, w_next: float) -> float:
    """Move ``state`` from ``t0`` to ``t1`` with window ``w_next`` at ``t1``.

    Appends the step's sending amount to ``send_flow`` and returns it.
    """
    acked = state.ack_flow.integrate(t0, t1)
    dw = w_next - state.w
    was_sending = state.pi == 0.0
    sent, pi, t_event = step_ack_buffer(state.pi, dw, acked, t0, t1 - t0)
    if t_event is not None:
        state.events.append((t_event, "retain" if was_sending else "resume"))
    state.send_flow.append_amount(t1, sent)
    state.pi = pi
    state.w = w_next
    state.sent_total += sent
    state.acked_total += acked
    state.acked_last = acked
    state.flight += sent - acked
    return sent


def flight_size(state: UserState, t: float, backward) -> float:
    """Packets sent in ``[B(t), t]`` where ``B`` is the backward circuit map."""
    b = backward(t)
    return state.send_flow.integrate(b, t)


def ack_flow(send_flow, t: float, backward, backward_slope) -> float:
    """Closed-form ACK rate ``B'(t) * send(B(t))``.

    The solver obtains ACKs compositionally; this is the cross-check.
    """
    return backward_slope(t) * send_flow.sample(backward(t))


def protocol_step(state: UserState, t: float, dt: float) -> float:
    """Advance the protocol state with the current measure; return ``w(t + dt)``."""
    z = state.protocol.advance(state.z, state.mu, t, dt)
    w = state.protocol.window(z, state.mu, t + dt)
    try:
        w = float(w)
    except (TypeError, ValueError):
        raise ProtocolError(f"user {state.id}: protocol returned a non-numeric window {w!r}") from None
    if not math.isfinite(w) or w < 0:
        raise ProtocolError(f"user {state.id}: protocol returned window {w!r} at t={t + dt:.9g}")
    state.z = z
    return w


def as_protocol(spec: Any) -> Any:
    """Accept a :class:`WindowScript`, a number, or a protocol object."""
    if isinstance(spec, WindowScript):
        return ScriptProtocol(spec)
    if isinstance(spec, (int, float)):
        return ScriptProtocol(WindowScript(float(spec)))
    for name in ("initial_state", "advance", "window"):
        if not callable(getattr(spec, name, None)):
            raise TypeError(f"protocol object lacks {name}()")
    return spec


def script_steps(scripts: Sequence[WindowScript]) -> list[float]:
    return sorted({t for s in scripts for t in s.step_times})
