"""Approximate sending-rate laws and the static-link queuing delay.

These replace the exact ACK-clocked sending law for side-by-side
comparisons; buffers and channels are unchanged.
"""

from __future__ import annotations

import logging
from typing import Mapping, Sequence

import numpy as np

__all__ = ["ratio_rate", "joint_rate", "static_link_tau", "static_link_trace", "APPROX_KINDS"]

log = logging.getLogger(__name__)

APPROX_KINDS = ("ratio", "joint", "static")


def ratio_rate(w: float, T: float, tau_back: float) -> float:
    """``w / (T + tau_back)`` with ``tau_back`` the backward-observed queuing delay."""
    rtt = T + tau_back
    if not rtt > 0:
        raise ValueError(f"round-trip time must be > 0, got {rtt!r}")
    return w / rtt


def joint_rate(w: float, w_dot: float, T: float, tau_fwd: float) -> float:
    """``w / (T + tau_fwd) + w_dot``, clamped at zero.

    ``tau_fwd`` is the queuing delay met by data sent now.
    """
    rtt = T + tau_fwd
    if not rtt > 0:
        raise ValueError(f"round-trip time must be > 0, got {rtt!r}")
    return max(w / rtt + w_dot, 0.0)


def static_link_tau(windows_delayed: Sequence[float] | np.ndarray, c: float, T: float):
    """``sum(windows) / c - T``; ``windows_delayed`` holds each user's window
    at ``t - T_f``.  Works elementwise on a ``(users, times)`` array."""
    s = np.sum(np.asarray(windows_delayed, dtype=float), axis=0)
    return s / c - T


def static_link_trace(time: np.ndarray, windows: Mapping[str, np.ndarray], forward_delays: Mapping[str, float],
                      c: float, T_offset: float) -> np.ndarray:
    """Static-link delay on a sampled grid, clamped at zero.

    Each window trajectory is interpolated linearly between samples and
    shifted by its user's forward delay; before the first sample the initial
    window holds.
    """
    delayed = [np.interp(time - forward_delays[u], time, w, left=w[0]) for u, w in windows.items()]
    return np.maximum(static_link_tau(delayed, c, T_offset), 0.0)
