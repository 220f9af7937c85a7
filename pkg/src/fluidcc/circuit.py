"""Circuit operators: composed propagation shifts and queue delay maps.

For a circuit ``u -> b1 -> ... -> bN -> u`` with channel delays
``d0, ..., dN``:

- the backward operator maps the arrival time of an ACK at the user to the
  time the acknowledged data left the user,
  ``B = shift(-d0) . g1 . shift(-d1) . ... . gN . shift(-dN)``;
- the forward operator is its inverse, ``F = shift(dN) . fN . ... . f1 . shift(d0)``.

``B`` only needs the past and is what the solver uses.  ``F`` needs the
future and is only defined after the fact.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from .errors import HistoryUnderrun, NotYetKnown
from .topology import Circuit

__all__ = ["CircuitOperator", "forward_time", "backward_time", "rtt_observed"]


@dataclass
class CircuitOperator:
    """Binds a circuit to the buffer states that realize its delay maps."""

    circuit: Circuit
    buffers: Mapping[str, object]
    kind: str = "backward"

    def __post_init__(self):
        if self.kind not in ("forward", "backward"):
            raise ValueError(f"kind must be 'forward' or 'backward', got {self.kind!r}")
        self._hops = [(self.buffers[b], d) for b, d in zip(self.circuit.buffers, self.circuit.fwd_delays)]
        self._back = self.circuit.backward_delay
        self.propagation = self.circuit.total_delay

    def __call__(self, t: float) -> float:
        return self.forward(t) if self.kind == "forward" else self.backward(t)

    def backward(self, t: float) -> float:
        x = t - self._back
        for buf, d in reversed(self._hops):
            x = buf.g(x) - d
        return x

    def forward(self, t: float) -> float:
        x = t
        for buf, d in self._hops:
            try:
                x = buf.f(x + d)
            except HistoryUnderrun as exc:
                if x + d > buf.t:
                    raise NotYetKnown(f"forward circuit time at {t!r} needs buffer {buf.id} beyond {buf.t!r}") from exc
                raise
        return x + self._back

    def backward_slope(self, t: float, h: float) -> float:
        """Average slope of ``B`` over ``[t - h, t]``."""
        return (self.backward(t) - self.backward(t - h)) / h

    def rtt(self, t: float) -> float:
        return t - self.backward(t)

    def queuing_delay(self, t: float) -> float:
        """Backward-observed queuing delay: ``rtt(t)`` minus propagation."""
        return max(self.rtt(t) - self.propagation, 0.0)


def forward_time(op: CircuitOperator, t: float) -> float:
    return op.forward(t)


def backward_time(op: CircuitOperator, t: float) -> float:
    return op.backward(t)


def rtt_observed(op: CircuitOperator, t: float) -> float:
    return op.rtt(t)
