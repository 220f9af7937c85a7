"""Flow signals: nonnegative piecewise-constant rates on the universal clock.

A signal is a sequence of breakpoints ``t_0 < t_1 < ... < t_m`` with a rate
attached to every half-open interval ``(t_k, t_{k+1}]``.  Evaluation is
left-continuous, so ``sample(t_k)`` returns the rate of the interval that
ends at ``t_k``.  Beyond the last breakpoint the last rate is held.

Cumulative packet counts are stored at every breakpoint, which makes
``integrate`` exact for the piecewise-constant interpolant and additive up to
one rounding unit of the accumulator.
"""

from __future__ import annotations

import math
from bisect import bisect_left
from typing import Iterable, Sequence

import numpy as np

from .errors import HistoryUnderrun

__all__ = [
    "FlowSignal",
    "DelayedSignal",
    "sample",
    "integrate",
    "delayed",
    "prune",
    "square_wave",
]

# Negative rates smaller than this (in packets/second) are rounding noise
# from differences of cumulative counts and are clamped to zero.
NEGATIVE_RATE_TOL = 1e-6


class FlowSignal:
    """Left-continuous piecewise-constant rate with exact integration.

    Parameters
    ----------
    t0 : float
        First breakpoint.
    initial_rate : float
        Rate for ``t <= t0`` when ``prehistory`` is true (method-of-steps
        history, constant before the start of the simulation).
    prehistory : bool
        If false, evaluating before ``t0`` raises :class:`HistoryUnderrun`.
    name : str, optional
        Label used in traces and error messages.
    """

    __slots__ = ("name", "initial_rate", "_times", "_rates", "_cum", "_tail", "_horizon")

    def __init__(self, t0: float = 0.0, initial_rate: float = 0.0, *, prehistory: bool = True, name: str | None = None):
        if initial_rate < 0 or not math.isfinite(initial_rate):
            raise ValueError(f"initial rate must be finite and >= 0, got {initial_rate!r}")
        self.name = name
        self.initial_rate = float(initial_rate)
        self._times = [float(t0)]
        self._rates: list[float] = []
        self._cum = [0.0]
        self._tail: float | None = None
        self._horizon = -math.inf if prehistory else float(t0)

    @classmethod
    def from_samples(cls, samples: Iterable[tuple[float, float]], *, prehistory_rate: float | None = None,
                     name: str | None = None) -> "FlowSignal":
        """Build a signal from ``(t, rate)`` pairs; each rate holds from its ``t``
        up to the next sample time, the last one indefinitely."""
        pairs = [(float(t), float(r)) for t, r in samples]
        if not pairs:
            raise ValueError("at least one sample is required")
        sig = cls(pairs[0][0], prehistory_rate if prehistory_rate is not None else 0.0,
                  prehistory=prehistory_rate is not None, name=name)
        for (_, r), (t_next, _) in zip(pairs, pairs[1:]):
            sig.append(t_next, r)
        last = pairs[-1][1]
        if last < 0:
            raise ValueError(f"negative rate {last!r}")
        sig._tail = last
        return sig

    # -- construction -------------------------------------------------------

    def append(self, t_next: float, rate: float) -> None:
        """Record that ``rate`` held over ``(now, t_next]``."""
        times = self._times
        t_prev = times[-1]
        if not t_next > t_prev:
            raise ValueError(f"sample times must be strictly increasing ({t_next!r} <= {t_prev!r})")
        if rate < 0.0:
            if rate < -NEGATIVE_RATE_TOL:
                raise ValueError(f"negative rate {rate!r} in signal {self.name!r}")
            rate = 0.0
        times.append(t_next)
        self._rates.append(rate)
        self._cum.append(self._cum[-1] + rate * (t_next - t_prev))

    def append_amount(self, t_next: float, amount: float) -> float:
        """Append the rate that carries ``amount`` packets over ``(now, t_next]``.

        The cumulative count is set to the exact target, so no rounding drift
        accumulates between a producer's bookkeeping and the signal.
        """
        times = self._times
        t_prev = times[-1]
        width = t_next - t_prev
        if not width > 0:
            raise ValueError(f"sample times must be strictly increasing ({t_next!r} <= {t_prev!r})")
        if amount < 0.0:
            if amount < -NEGATIVE_RATE_TOL * width:
                raise ValueError(f"negative amount {amount!r} in signal {self.name!r}")
            amount = 0.0
        rate = amount / width
        times.append(t_next)
        self._rates.append(rate)
        self._cum.append(self._cum[-1] + amount)
        return rate

    # -- properties ---------------------------------------------------------

    @property
    def horizon(self) -> float:
        """Earliest time at which the signal can still be evaluated."""
        return self._horizon

    @property
    def start(self) -> float:
        return self._times[0]

    @property
    def now(self) -> float:
        """Last breakpoint; the signal is fully known up to this time."""
        return self._times[-1]

    @property
    def last_rate(self) -> float:
        if self._tail is not None:
            return self._tail
        return self._rates[-1] if self._rates else self.initial_rate

    def __len__(self) -> int:
        return len(self._rates)

    def __repr__(self) -> str:
        return f"FlowSignal({self.name!r}, {len(self._rates)} intervals, [{self._times[0]:g}, {self._times[-1]:g}])"

    # -- evaluation ---------------------------------------------------------

    def sample(self, t: float) -> float:
        times = self._times
        if t <= times[0]:
            if t < self._horizon:
                raise HistoryUnderrun(f"{self.name or 'signal'}: t={t!r} before horizon {self._horizon!r}")
            if self._horizon == -math.inf:
                return self.initial_rate
            # t == horizon == first breakpoint without prehistory: right value
            return self._rates[0] if self._rates else self.last_rate
        k = bisect_left(times, t) - 1
        if k >= len(self._rates):
            return self.last_rate
        return self._rates[k]

    def cumulative(self, t: float) -> float:
        """Packets counted since the first breakpoint (negative before it)."""
        times = self._times
        t_first = times[0]
        if t <= t_first:
            if t < self._horizon:
                raise HistoryUnderrun(f"{self.name or 'signal'}: t={t!r} before horizon {self._horizon!r}")
            return self._cum[0] + (t - t_first) * self.initial_rate
        k = bisect_left(times, t) - 1
        rates = self._rates
        if k >= len(rates):
            return self._cum[-1] + (t - times[-1]) * self.last_rate
        return self._cum[k] + rates[k] * (t - times[k])

    def integrate(self, t0: float, t1: float) -> float:
        """Exact integral of the rate over ``[t0, t1]``."""
        if t1 < t0:
            raise ValueError(f"reversed integration bounds ({t0!r}, {t1!r})")
        if t1 == t0:
            if t0 < self._horizon:
                raise HistoryUnderrun(f"{self.name or 'signal'}: t={t0!r} before horizon {self._horizon!r}")
            return 0.0
        return self.cumulative(t1) - self.cumulative(t0)

    def delayed(self, T: float) -> "FlowSignal | DelayedSignal":
        if T < 0:
            raise ValueError(f"delay must be >= 0, got {T!r}")
        if T == 0:
            return self
        return DelayedSignal(self, T)

    def prune(self, new_horizon: float) -> "FlowSignal":
        """Forget breakpoints older than ``new_horizon``; returns ``self``."""
        if new_horizon <= self._horizon:
            return self
        if new_horizon > self._times[-1]:
            raise ValueError(f"cannot prune beyond the current time {self._times[-1]!r}")
        k = bisect_left(self._times, new_horizon)
        if k < len(self._times) and self._times[k] == new_horizon:
            keep = k
        else:
            keep = k - 1
        if keep > 0:
            del self._times[:keep]
            del self._rates[:keep]
            del self._cum[:keep]
        self._horizon = float(new_horizon)
        return self

    # -- export -------------------------------------------------------------

    def breakpoints(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(times, rates)``; ``rates[k]`` holds on ``(times[k], times[k+1]]``."""
        return np.asarray(self._times), np.asarray(self._rates)

    def to_csv(self, path) -> None:
        """Write ``time,rate`` rows, one per interval start."""
        times, rates = self.breakpoints()
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("time,rate\n")
            for t, r in zip(times[:-1], rates):
                fh.write(f"{t:.9g},{r:.9g}\n")


class DelayedSignal:
    """Read-only view ``t -> base(t - T)``: a lossless constant-delay channel."""

    __slots__ = ("base", "delay")

    def __init__(self, base: FlowSignal, T: float):
        if isinstance(base, DelayedSignal):
            T += base.delay
            base = base.base
        self.base = base
        self.delay = float(T)

    @property
    def name(self):
        return self.base.name

    @property
    def horizon(self) -> float:
        return self.base.horizon + self.delay

    @property
    def now(self) -> float:
        return self.base.now + self.delay

    def sample(self, t: float) -> float:
        return self.base.sample(t - self.delay)

    def cumulative(self, t: float) -> float:
        return self.base.cumulative(t - self.delay)

    def integrate(self, t0: float, t1: float) -> float:
        return self.base.integrate(t0 - self.delay, t1 - self.delay)

    def delayed(self, T: float) -> "DelayedSignal":
        if T < 0:
            raise ValueError(f"delay must be >= 0, got {T!r}")
        return DelayedSignal(self.base, self.delay + T)

    def __repr__(self) -> str:
        return f"DelayedSignal({self.base!r}, T={self.delay:g})"


def sample(sig, t: float) -> float:
    return sig.sample(t)


def integrate(sig, t0: float, t1: float) -> float:
    return sig.integrate(t0, t1)


def delayed(sig, T: float):
    return sig.delayed(T)


def prune(sig: FlowSignal, new_horizon: float) -> FlowSignal:
    return sig.prune(new_horizon)


def square_wave(high: float, period: float, t_end: float, *, low: float = 0.0, invert: bool = False,
                name: str | None = None) -> FlowSignal:
    """Rate ``high`` on the first half of each period and ``low`` on the second.

    ``invert`` swaps the halves.  This is ``(high - low) * (1 + sign(sin(2 pi t / period))) / 2 + low``.
    """
    half = period / 2.0
    n_half = int(math.ceil(t_end / half))
    samples: list[tuple[float, float]] = []
    for k in range(n_half + 1):
        first_half = (k % 2 == 0) != invert
        samples.append((k * half, high if first_half else low))
    return FlowSignal.from_samples(samples, name=name)


def piecewise_from_function(fn, t_end: float, dt: float, *, name: str | None = None,
                            points: Sequence[float] = (0.5,)) -> FlowSignal:
    """Sample-and-hold approximation of a smooth rate function on a ``dt`` grid.

    Each interval gets the mean of ``fn`` at the given relative ``points``
    (midpoint by default), which is second-order accurate for the interval
    average.
    """
    n = int(round(t_end / dt))
    sig = FlowSignal(0.0, max(float(fn(0.0)), 0.0), name=name)
    rel = np.asarray(points, dtype=float)
    for k in range(n):
        t = k * dt
        sig.append((k + 1) * dt, float(np.mean([fn(t + p * dt) for p in rel])))
    return sig
