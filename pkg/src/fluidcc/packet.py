"""Discrete-event packet simulator used as ground truth for the fluid models.

Window-based sources keep ``outstanding < w`` packets in flight, sending one
packet per received ACK and a back-to-back burst when the window grows.  A
shrinking window silences the source until enough ACKs have come back.
Buffers are FIFO queues served at ``c`` packets/second; channels are pure
delays; ACKs travel back uncongested.  Exogenous flows (cross-traffic and
open-loop sources) are deterministic packet streams whose n-th packet is
emitted when the cumulative fluid count reaches ``n - 1/2``.

Events at equal timestamps are processed in the order dequeue, enqueue, ACK
arrival, source action, then by insertion order, so runs replay exactly.
"""

from __future__ import annotations

import heapq
import math
import time as _time
from collections import deque
from typing import Iterator

import numpy as np

from .errors import SolverError
from .scenario import Scenario
from .topology import NetworkGraph
from .traces import TraceSet

__all__ = ["PacketQueue", "PacketSimulation", "run_packet_sim", "silent_periods", "DEQUEUE", "ENQUEUE", "ACK",
           "SEND"]

DEQUEUE, ENQUEUE, ACK, SEND = 0, 1, 2, 3
EVENT_NAMES = {DEQUEUE: "dequeue", ENQUEUE: "enqueue", ACK: "ack_arrival", SEND: "source_send"}


class PacketQueue:
    """FIFO served at ``c`` packets/second, one packet in service at a time."""

    __slots__ = ("id", "c", "service", "fifo", "busy", "work_end", "n_in", "n_out", "n_in_cls", "n_out_cls")

    def __init__(self, id: str, c: float, classes):
        self.id = id
        self.c = float(c)
        self.service = 1.0 / self.c
        self.fifo: deque = deque()
        self.busy = False
        self.work_end = -math.inf
        self.n_in = 0
        self.n_out = 0
        self.n_in_cls = {k: 0 for k in classes}
        self.n_out_cls = {k: 0 for k in classes}

    def backlog(self, t: float) -> float:
        """Unfinished work at ``t`` in packets (fractional while one is in service)."""
        return self.c * max(0.0, self.work_end - t)

    def __len__(self):
        return len(self.fifo)


def _exogenous_times(signal, t_end: float, start_count: float = 0.0) -> Iterator[float]:
    """Instants at which the cumulative count of ``signal`` crosses ``n - 1/2``."""
    times, rates = signal.breakpoints()
    edges = list(times) + [max(t_end, times[-1]) + 1.0]
    rates = list(rates) + [signal.last_rate]
    n = math.floor(start_count + 0.5) + 1
    cum = 0.0
    for a, b, r in zip(edges[:-1], edges[1:], rates):
        if r <= 0:
            continue
        end = cum + r * (b - a)
        while n - 0.5 <= end:
            t = a + (n - 0.5 - cum) / r
            if t > t_end:
                return
            yield t
            n += 1
        cum = end


class PacketSimulation:
    def __init__(self, scenario: Scenario, *, dt: float | None = None, t_end: float | None = None,
                 init: str | None = None, record_every: int = 1, event_tol: float = 1e-9, graph: NetworkGraph | None = None,
                 record_crossings: bool = True, record_order: bool = False):
        self.scenario = scenario
        self.graph = graph or scenario.graph()
        self.dt = float(dt if dt is not None else scenario.run.dt)
        self.t_end = float(t_end if t_end is not None else scenario.run.t_end)
        self.init = init or scenario.run.init
        if self.init not in ("equilibrium", "empty"):
            raise ValueError(f"unknown init {self.init!r}")
        self.record_every = int(record_every)
        self.event_tol = float(event_tol)
        self.record_crossings = record_crossings
        # per queue: packet ids in enqueue order and in dequeue order
        self.order_log = {b: ([], []) for b in scenario.graph().buffers} if record_order else None
        g = self.graph
        self.queues = {b: PacketQueue(b, buf.capacity, g.buffer_classes(b)) for b, buf in g.buffers.items()}
        self.cross_specs = {x.id: x for x in scenario.cross_traffic}
        # per class: list of (buffer, delay before it), then the delay after the last buffer
        self.routes: dict[str, tuple[list[tuple[str, float]], float | None]] = {}
        for u, circ in g.circuits.items():
            self.routes[u] = (list(zip(circ.buffers, circ.fwd_delays)), circ.backward_delay)
        for x, spec in self.cross_specs.items():
            self.routes[x] = ([(spec.buffer, 0.0)], None)
        self.w = {u.id: u.script.value(0.0) for u in scenario.users}
        self.outstanding = {u: 0 for u in self.w}
        self.sent = {u: 0 for u in self.w}
        self.acked = {u: 0 for u in self.w}
        self.heap: list = []
        self.seq = 0
        self.pid = 0
        self.crossings: dict[str, list[float]] = {}
        self.events_log: list = []
        self.n_events = 0

    # -- event helpers ----------------------------------------------------------

    def _push(self, t: float, prio: int, *payload) -> None:
        self.seq += 1
        heapq.heappush(self.heap, (t, prio, self.seq, payload))

    def _cross(self, node: str, t: float) -> None:
        if self.record_crossings:
            lst = self.crossings.get(node)
            if lst is None:
                lst = self.crossings[node] = []
            lst.append(t)

    def _new_packet(self, cls: str) -> tuple[int, str]:
        self.pid += 1
        return (self.pid, cls)

    def _send(self, u: str, t: float) -> None:
        hops, back = self.routes[u]
        while self.outstanding[u] < self.w[u] - 1e-9:
            self.outstanding[u] += 1
            self.sent[u] += 1
            self._cross(f"{u}+", t)
            pkt = self._new_packet(u)
            if hops:
                b, d = hops[0]
                self._push(t + d, ENQUEUE, b, pkt, 0)
            else:
                self._push(t + back, ACK, u, pkt)

    def _enqueue(self, t: float, b: str, pkt, hop: int) -> None:
        q = self.queues[b]
        q.fifo.append((pkt, hop, t))
        q.n_in += 1
        q.n_in_cls[pkt[1]] += 1
        self._cross(f"{b}-", t)
        self._cross(f"{b}-.{pkt[1]}", t)
        q.work_end = max(q.work_end, t) + q.service
        if self.order_log is not None:
            self.order_log[b][0].append(pkt[0])
        if not q.busy:
            q.busy = True
            self._push(t + q.service, DEQUEUE, b)

    def _dequeue(self, t: float, b: str) -> None:
        q = self.queues[b]
        if not q.fifo:
            raise SolverError(f"queue {b}: dequeue from an empty FIFO at t={t!r}")
        pkt, hop, _ = q.fifo.popleft()
        q.n_out += 1
        cls = pkt[1]
        q.n_out_cls[cls] += 1
        self._cross(f"{b}+", t)
        self._cross(f"{b}+.{cls}", t)
        if self.order_log is not None:
            self.order_log[b][1].append(pkt[0])
        hops, back = self.routes[cls]
        if hop + 1 < len(hops):
            nb, d = hops[hop + 1]
            self._push(t + d, ENQUEUE, nb, pkt, hop + 1)
        elif back is not None:
            self._push(t + back, ACK, cls, pkt)
        if q.fifo:
            self._push(t + q.service, DEQUEUE, b)
        else:
            q.busy = False

    def _ack(self, t: float, u: str) -> None:
        self.outstanding[u] -= 1
        self.acked[u] += 1
        self._cross(f"{u}-", t)
        self._send(u, t)

    # -- initial state ------------------------------------------------------------

    def _init_equilibrium(self) -> None:
        from .solver import scenario_equilibrium

        eq = scenario_equilibrium(self.scenario, self.w, self.graph)
        in_queue: dict[str, list] = {b: [] for b in self.queues}
        g = self.graph
        for u, hops_back in self.routes.items():
            if u in self.cross_specs:
                continue
            hops, back = hops_back
            x = eq.rate[u]
            if x <= 0:
                continue
            rtt = eq.rtt[u]
            n = 0
            while True:
                s = -(n + 0.5) / x
                n += 1
                if s + rtt <= 0:
                    break
                self.outstanding[u] += 1
                pkt = self._new_packet(u)
                t = s
                placed = False
                for j, (b, d) in enumerate(hops):
                    t += d
                    if t > 0:
                        self._push(t, ENQUEUE, b, pkt, j)
                        placed = True
                        break
                    dep = t + eq.tau[b]
                    if dep > 0:
                        in_queue[b].append((t, pkt, j))
                        placed = True
                        break
                    t = dep
                if not placed:
                    self._push(t + back, ACK, u, pkt)
        for x, spec in self.cross_specs.items():
            b = spec.buffer
            r = g.buffers[b].capacity * spec.value(0.0)
            if r <= 0:
                continue
            n = 0
            while True:
                a = -(n + 0.5) / r
                n += 1
                if a + eq.tau[b] <= 0:
                    break
                in_queue[b].append((a, self._new_packet(x), 0))
        for b, items in in_queue.items():
            if not items:
                continue
            items.sort(key=lambda it: it[0])
            q = self.queues[b]
            for a, pkt, j in items:
                q.fifo.append((pkt, j, a))
            head_dep = min(max(items[0][0] + eq.tau[b], 0.0), q.service)
            if head_dep <= 0:
                head_dep = q.service
            q.work_end = head_dep + (len(items) - 1) * q.service
            q.busy = True
            self._push(head_dep, DEQUEUE, b)

    # -- run -------------------------------------------------------------------------

    def run(self) -> TraceSet:
        wall = _time.perf_counter()
        sc, g = self.scenario, self.graph
        if self.init == "equilibrium" and sc.users:
            self._init_equilibrium()
        else:
            for u in self.w:
                self._send(u, 0.0)
        for spec in sc.users:
            for ts, wv in spec.window_steps:
                if ts <= self.t_end:
                    self._push(ts, SEND, spec.id, wv)
        for x, spec in self.cross_specs.items():
            c = g.buffers[spec.buffer].capacity
            sig = spec.signal(c, self.t_end + 1.0)
            for t in _exogenous_times(sig, self.t_end):
                self._push(t, ENQUEUE, spec.buffer, self._new_packet(x), 0)

        cols, getters = self._column_spec()
        dt, every = self.dt, self.record_every
        n_samples = int(round(self.t_end / dt)) // every + 1
        sample_dt = dt * every
        data = np.empty((n_samples, len(cols)))
        times = np.arange(n_samples) * sample_dt
        i = 0
        prev_counts = None
        heap = self.heap
        pop = heapq.heappop
        while i < n_samples:
            t_next = heap[0][0] if heap else math.inf
            # left-limit sampling: a sample at ts only sees events earlier than ts - event_tol
            while i < n_samples and times[i] <= t_next + self.event_tol:
                row, prev_counts = self._sample(times[i], getters, prev_counts, sample_dt)
                data[i] = row
                i += 1
            if i >= n_samples:
                break
            if not heap:
                break
            t, prio, _, payload = pop(heap)
            self.n_events += 1
            if prio == DEQUEUE:
                self._dequeue(t, payload[0])
            elif prio == ENQUEUE:
                self._enqueue(t, payload[0], payload[1], payload[2])
            elif prio == ACK:
                self._ack(t, payload[0])
            else:
                u, wv = payload
                self.w[u] = wv
                self.events_log.append((t, u, "window"))
                self._send(u, t)
        if i < n_samples and any(self.outstanding.values()):
            raise SolverError("packet simulation ran out of events with packets outstanding")
        trace = TraceSet(sc.name, times, {c: data[:, j] for j, c in enumerate(cols)},
                         meta={"scenario": sc.name, "model": "packet", "init": self.init, "dt": dt,
                               "t_end": self.t_end, "events": self.n_events,
                               "runtime_s": _time.perf_counter() - wall},
                         events=self.events_log, crossings=self.crossings)
        return trace

    def _column_spec(self):
        cols, getters = [], []
        for b, q in self.queues.items():
            cols += [f"{b}.q", f"{b}.count", f"{b}.cum_in", f"{b}.cum_out"]
            getters += [("backlog", b), ("len", b), ("in", b), ("out", b)]
            for k in q.n_in_cls:
                cols += [f"{b}.cum_in.{k}", f"{b}.cum_out.{k}"]
                getters += [("in_cls", b, k), ("out_cls", b, k)]
        for u in self.w:
            cols += [f"{u}.w", f"{u}.flight", f"{u}.pi", f"{u}.cum_sent", f"{u}.cum_ack", f"{u}.send", f"{u}.ack"]
            getters += [("w", u), ("out", u), ("pi", u), ("sent", u), ("acked", u), ("send_rate", u),
                        ("ack_rate", u)]
        return cols, getters

    def _sample(self, t, getters, prev, h):
        row = []
        counts = {u: (self.sent[u], self.acked[u]) for u in self.w}
        for gsp in getters:
            kind = gsp[0]
            if kind == "backlog":
                row.append(self.queues[gsp[1]].backlog(t))
            elif kind == "len":
                row.append(len(self.queues[gsp[1]]))
            elif kind == "in":
                row.append(self.queues[gsp[1]].n_in)
            elif kind == "out":
                if gsp[1] in self.queues:
                    row.append(self.queues[gsp[1]].n_out)
                else:
                    row.append(self.outstanding[gsp[1]])
            elif kind == "in_cls":
                row.append(self.queues[gsp[1]].n_in_cls[gsp[2]])
            elif kind == "out_cls":
                row.append(self.queues[gsp[1]].n_out_cls[gsp[2]])
            elif kind == "w":
                row.append(self.w[gsp[1]])
            elif kind == "pi":
                u = gsp[1]
                row.append(min(0.0, self.w[u] - self.outstanding[u]))
            elif kind == "sent":
                row.append(self.sent[gsp[1]])
            elif kind == "acked":
                row.append(self.acked[gsp[1]])
            elif kind == "send_rate":
                u = gsp[1]
                row.append(0.0 if prev is None else (counts[u][0] - prev[u][0]) / h)
            elif kind == "ack_rate":
                u = gsp[1]
                row.append(0.0 if prev is None else (counts[u][1] - prev[u][1]) / h)
        return row, counts


def run_packet_sim(scenario: Scenario, graph: NetworkGraph | None = None, **kw) -> TraceSet:
    """Packet-level run of ``scenario``; keyword arguments go to :class:`PacketSimulation`."""
    return PacketSimulation(scenario, graph=graph, **kw).run()


def silent_periods(trace: TraceSet, user: str, after: float = 0.0) -> list[tuple[float, float]]:
    """Gaps between consecutive sends of ``user`` starting at or after ``after``,
    longer than ten mean inter-send times, as ``(start, end)`` pairs."""
    sends = np.asarray(trace.crossings.get(f"{user}+", []))
    sends = sends[sends >= after]
    if sends.size < 2:
        return []
    gaps = np.diff(sends)
    typical = np.median(gaps)
    idx = np.nonzero(gaps > 10 * typical)[0]
    return [(float(sends[k]), float(sends[k + 1])) for k in idx]
