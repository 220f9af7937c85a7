"""Fixed-step solver for networks of users, buffers, channels and cross-traffic.

Every element keeps its output as a piecewise-constant signal on the step
grid.  A channel of delay ``d`` hands the downstream element the upstream
signal shifted by ``d``, so all delayed lookups are exact integrals of
stored history.  Elements are stepped in an order in which everything
reached through a channel shorter than one step has already been advanced.

Within a step:

1. each user's protocol produces the window at the end of the step from the
   congestion measure at its start;
2. users and buffers advance in dependency order (users send according to
   the selected rate law, buffers integrate their queues and split outputs);
3. round-trip times, congestion measures and flight sizes are read through
   the backward circuit operators and recorded.
"""

from __future__ import annotations

import logging
import math
import time as _time
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
from scipy.optimize import brentq

from .approx import static_link_trace
from .buffer import BufferState
from .circuit import CircuitOperator
from .errors import FluidError, SolverError
from .scenario import MODELS, Scenario
from .signal import FlowSignal
from .topology import NetworkGraph
from .traces import TraceRecorder, TraceSet
from .user import ScriptProtocol, UserState, as_protocol, protocol_step, step_user

__all__ = ["SimulationConfig", "NetworkState", "Equilibrium", "Simulation", "simulate", "equilibrium",
           "conservation_residuals"]

log = logging.getLogger(__name__)


@dataclass
class SimulationConfig:
    """Run parameters; ``None`` fields fall back to the scenario's ``[run]`` section."""

    dt: float | None = None
    t_end: float | None = None
    event_tol: float = 1e-9
    model: str | None = None
    init: str | None = None
    prune: bool = True
    record_every: int = 1
    check_every: int = 1000
    protocols: Mapping[str, Any] = field(default_factory=dict)

    def resolve(self, scenario: Scenario) -> "SimulationConfig":
        cfg = SimulationConfig(
            dt=float(self.dt if self.dt is not None else scenario.run.dt),
            t_end=float(self.t_end if self.t_end is not None else scenario.run.t_end),
            event_tol=self.event_tol,
            model=self.model or scenario.run.model,
            init=self.init or scenario.run.init,
            prune=self.prune,
            record_every=int(self.record_every),
            check_every=int(self.check_every),
            protocols=dict(self.protocols),
        )
        if not cfg.dt > 0:
            raise ValueError("dt must be > 0")
        if not cfg.event_tol < cfg.dt:
            raise ValueError("event_tol must be smaller than dt")
        if cfg.model not in MODELS:
            raise ValueError(f"unknown model {cfg.model!r}; expected one of {MODELS}")
        if cfg.record_every < 1:
            raise ValueError("record_every must be >= 1")
        return cfg


@dataclass
class Equilibrium:
    tau: dict[str, float]
    rate: dict[str, float]
    queue: dict[str, float]
    rtt: dict[str, float]


def equilibrium(graph: NetworkGraph, windows: Mapping[str, float],
                cross_fraction: Mapping[str, float] | None = None, *, tol: float = 1e-14,
                max_sweeps: int = 100000) -> Equilibrium:
    """Queuing delays at which constant windows are in balance with capacities.

    Solves, for every buffer ``j``, ``sum_i w_i / (T_i + sum_{k in i} tau_k) <= c_j (1 - delta_j)``
    with equality wherever ``tau_j > 0``.  These are the optimality conditions
    of a convex problem in ``tau``; it is solved by exact coordinate
    minimization, one scalar root per buffer and sweep.
    """
    cross_fraction = cross_fraction or {}
    users = list(graph.circuits)
    paths = {u: graph.circuits[u].buffers for u in users}
    T = {u: graph.circuits[u].total_delay for u in users}
    w = {u: float(windows[u]) for u in users}
    cap = {}
    for b, buf in graph.buffers.items():
        c_eff = buf.capacity * (1.0 - cross_fraction.get(b, 0.0))
        if not c_eff > 0:
            raise SolverError(f"buffer {b}: no capacity left after exogenous traffic")
        cap[b] = c_eff
    members = {b: [u for u in users if b in paths[u] and w[u] > 0] for b in graph.buffers}
    tau = {b: 0.0 for b in graph.buffers}

    for _ in range(max_sweeps):
        change = 0.0
        for b, us in members.items():
            if not us:
                continue
            other = [T[u] + sum(tau[k] for k in paths[u] if k != b) for u in us]
            ws = [w[u] for u in us]
            c = cap[b]

            def h(x, other=other, ws=ws, c=c):
                return sum(wi / (oi + x) for wi, oi in zip(ws, other)) - c

            if min(other) > 0 and h(0.0) <= 0:
                new = 0.0
            else:
                hi = sum(ws) / c
                lo = 0.0 if min(other) > 0 else 1e-300
                new = brentq(h, lo, hi, xtol=1e-16, rtol=1e-15, maxiter=500)
            change = max(change, abs(new - tau[b]))
            tau[b] = new
        if change <= tol:
            break
    else:
        raise SolverError("equilibrium iteration did not converge")

    rtt = {u: T[u] + sum(tau[k] for k in paths[u]) for u in users}
    rate = {u: (w[u] / rtt[u] if w[u] > 0 else 0.0) for u in users}
    if any(not r > 0 for u, r in rtt.items() if w[u] > 0):
        raise SolverError("a user with a positive window has a zero round-trip time")
    queue = {b: tau[b] * graph.buffers[b].capacity for b in graph.buffers}
    return Equilibrium(tau, rate, queue, rtt)


def scenario_equilibrium(scenario: Scenario, windows: Mapping[str, float] | None = None,
                         graph: NetworkGraph | None = None) -> Equilibrium:
    """Equilibrium of a scenario with constant cross-traffic at its t=0 value."""
    graph = graph or scenario.graph()
    if windows is None:
        windows = {u.id: u.script.value(0.0) for u in scenario.users}
    frac: dict[str, float] = {}
    for x in scenario.cross_traffic:
        frac[x.buffer] = frac.get(x.buffer, 0.0) + x.value(0.0)
    return equilibrium(graph, windows, frac)


@dataclass
class NetworkState:
    t: float
    buffers: dict[str, BufferState]
    users: dict[str, UserState]
    cross: dict[str, FlowSignal]
    ops: dict[str, CircuitOperator]


class Simulation:
    """One run of a scenario; ``run()`` returns the traces and leaves the final
    :class:`NetworkState` in ``self.state``."""

    def __init__(self, scenario: Scenario, config: SimulationConfig | None = None, graph: NetworkGraph | None = None):
        self.scenario = scenario
        self.config = (config or SimulationConfig()).resolve(scenario)
        self.graph = graph or scenario.graph()
        self.eq: Equilibrium | None = None
        self._setup()

    # -- setup ----------------------------------------------------------------

    def _setup(self):
        sc, cfg, g = self.scenario, self.config, self.graph
        dt = cfg.dt
        eq_init = cfg.init == "equilibrium"
        model = cfg.model
        buffer_model = "pseudo_queue" if model == "pseudo_queue" else "flow"
        w0 = {u.id: u.script.value(0.0) for u in sc.users}
        cross_specs = {x.id: x for x in sc.cross_traffic}

        if eq_init:
            self.eq = scenario_equilibrium(sc, w0, g)
            rates = dict(self.eq.rate)
            tau = dict(self.eq.tau)
        else:
            rates = {u: 0.0 for u in g.users}
            tau = {b: 0.0 for b in g.buffers}
        for b, buf in g.buffers.items():
            if buf.tau0 is not None:
                tau[b] = buf.tau0

        cross = {}
        for xid, spec in cross_specs.items():
            c = g.buffers[spec.buffer].capacity
            pre = c * spec.value(0.0) if eq_init else 0.0
            cross[xid] = spec.signal(c, cfg.t_end + 1.0, prehistory_rate=pre)

        buffers = {}
        for b, buf in g.buffers.items():
            classes = g.buffer_classes(b)
            init_rates = {}
            for k in classes:
                if k in cross_specs:
                    init_rates[k] = cross[k].initial_rate
                else:
                    init_rates[k] = rates[k]
            buffers[b] = BufferState(b, buf.capacity, classes, q0=buf.capacity * tau[b], initial_rates=init_rates,
                                     model=buffer_model)

        users = {}
        for spec in sc.users:
            uid = spec.id
            circ = g.circuits[uid]
            proto = as_protocol(cfg.protocols.get(uid, spec.script))
            send = FlowSignal(0.0, rates[uid], name=f"{uid}+")
            if circ.buffers:
                last = buffers[circ.buffers[-1]].class_outputs[uid]
                ack = last.delayed(circ.backward_delay)
            else:
                ack = send.delayed(circ.total_delay)
            start_w = w0[uid] if eq_init else 0.0
            users[uid] = UserState(uid, start_w, proto, z=proto.initial_state(w0[uid]), send_flow=send, ack_flow=ack,
                                   flight=start_w)
        ops = {u: CircuitOperator(g.circuits[u], buffers) for u in users}
        self.state = NetworkState(0.0, buffers, users, cross, ops)
        self.flight0 = {u: users[u].flight for u in users}
        self.cross_backlog0 = {x: buffers[cross_specs[x].buffer].class_backlog0[x] for x in cross_specs}

        # inputs of every buffer as delayed views of upstream signals
        self.buffer_inputs: dict[str, list[tuple[str, Any]]] = {}
        for b in g.buffers:
            views = []
            for cls, (src, d) in g.class_sources(b).items():
                if src in cross_specs:
                    views.append((cls, cross[src]))
                elif src in users:
                    views.append((cls, users[src].send_flow.delayed(d)))
                else:
                    views.append((cls, buffers[src].class_outputs[cls].delayed(d)))
            self.buffer_inputs[b] = views

        self.order = self._schedule(dt)
        self.max_delay = max([c.delay for c in sc.channels], default=0.0)

    def _schedule(self, dt: float) -> list[tuple[str, str]]:
        g = self.graph
        lim = dt * (1 - 1e-9)
        deps: dict[tuple[str, str], set] = {}
        for b in g.buffers:
            d = set()
            for cls, (src, delay) in g.class_sources(b).items():
                if delay < lim and src in g.users:
                    d.add(("user", src))
                elif delay < lim and src in g.buffers:
                    d.add(("buffer", src))
            deps[("buffer", b)] = d
        for u, circ in g.circuits.items():
            d = set()
            if circ.buffers:
                if circ.backward_delay < lim:
                    d.add(("buffer", circ.buffers[-1]))
            elif circ.total_delay < lim:
                raise SolverError(f"user {u}: circuit delay {circ.total_delay!r} shorter than the step {dt!r}")
            deps[("user", u)] = d
        order: list[tuple[str, str]] = []
        done: set = set()
        # users first in declaration order, so a zero-delay access link just works
        pending = [("user", u) for u in g.users] + [("buffer", b) for b in g.buffers]
        while pending:
            ready = [n for n in pending if deps[n] <= done]
            if not ready:
                raise SolverError(f"elements {pending} form a loop of channels shorter than the step {dt!r}")
            for n in ready:
                order.append(n)
                done.add(n)
                pending.remove(n)
        return order

    # -- columns ----------------------------------------------------------------

    def _columns(self) -> list[str]:
        cols = []
        pseudo = self.config.model == "pseudo_queue"
        for b, st in self.state.buffers.items():
            cols += [f"{b}.q", f"{b}.tau", f"{b}.in", f"{b}.out", f"{b}.congested", f"{b}.cum_in", f"{b}.cum_out"]
            for k in st.classes:
                cols += [f"{b}.in.{k}", f"{b}.out.{k}", f"{b}.cum_in.{k}", f"{b}.cum_out.{k}"]
                if pseudo:
                    cols.append(f"{b}.pq.{k}")
        for u in self.state.users:
            cols += [f"{u}.w", f"{u}.flight", f"{u}.pi", f"{u}.send", f"{u}.ack", f"{u}.rtt", f"{u}.cum_sent",
                     f"{u}.cum_ack"]
        for x in self.state.cross:
            cols.append(f"{x}.rate")
        return cols

    def _row(self, t: float, step_rates: dict | None) -> list[float]:
        st = self.state
        vals: list[float] = []
        pseudo = self.config.model == "pseudo_queue"
        for b, buf in st.buffers.items():
            cin = cout = 0.0
            cls_vals = []
            for k in buf.classes:
                si, so = buf.class_inputs[k], buf.class_outputs[k]
                ci, co = si._cum[-1], so._cum[-1]
                cin += ci
                cout += co
                if step_rates is None:
                    ri, ro = si.initial_rate, so.initial_rate
                else:
                    ri, ro = si._rates[-1], so._rates[-1]
                cls_vals += [ri, ro, ci, co]
                if pseudo:
                    cls_vals.append(buf.pseudo_class_queues[k])
            if step_rates is None:
                a_in = sum(buf.class_inputs[k].initial_rate for k in buf.classes)
                a_out = sum(buf.class_outputs[k].initial_rate for k in buf.classes)
            else:
                a_in, a_out = buf.last_in, buf.last_out
            vals += [buf.q, buf.tau, a_in, a_out, 1.0 if buf.congested else 0.0, cin, cout]
            vals += cls_vals
        for u, us in st.users.items():
            m = self._meas[u]
            if step_rates is None:
                send, ack = us.send_flow.initial_rate, us.ack_flow.sample(t)
            else:
                send, ack = step_rates[u]
            vals += [us.w, m[1], us.pi, send, ack, m[0], us.sent_total, us.acked_total]
        for x, sig in st.cross.items():
            vals.append(sig.sample(t) if step_rates is None else sig.integrate(t - self.config.dt, t) / self.config.dt)
        return vals

    # -- stepping ---------------------------------------------------------------

    def _measure(self, t: float) -> None:
        """Round-trip time, congestion measure and flight size at ``t``."""
        self._meas = {}
        self._back = {}
        for u, us in self.state.users.items():
            op = self.state.ops[u]
            b = op.backward(t)
            rtt = t - b
            us.mu = max(rtt - op.propagation, 0.0)
            fl = us.send_flow.integrate(b, t)
            self._meas[u] = (rtt, fl)
            self._back[u] = b

    def run(self) -> TraceSet:
        cfg, st, g = self.config, self.state, self.graph
        dt = cfg.dt
        n = int(round(cfg.t_end / dt))
        model = cfg.model
        approx = model in ("ratio", "joint")
        users, buffers = st.users, st.buffers
        paths = {u: g.circuits[u].buffers for u in users}
        prop = {u: g.circuits[u].total_delay for u in users}
        order = [(kind, users[i] if kind == "user" else buffers[i], i) for kind, i in self.order]
        n_rows = n // cfg.record_every + 2
        rec = TraceRecorder(self._columns(), n_rows)
        events: list = []
        checks: list = []
        prune_every = max(1, int(round(0.5 / dt)))
        wall = _time.perf_counter()

        self._measure(0.0)
        rec.row(0.0, self._row(0.0, None))
        checks.append(self._check(0.0))
        was_busy = {b: buf.q > 0 for b, buf in buffers.items()}
        try:
            for k in range(n):
                t0 = k * dt
                t1 = (k + 1) * dt
                w_next = {u: protocol_step(us, t0, dt) for u, us in users.items()}
                if approx:
                    tau_now = {u: sum(buffers[b].tau for b in paths[u]) for u in users}
                rates = {}
                for kind, obj, ident in order:
                    if kind == "buffer":
                        amounts = {cls: view.integrate(t0, t1) for cls, view in self.buffer_inputs[ident]}
                        obj.step(t1, amounts)
                        if not math.isfinite(obj.q):
                            raise SolverError(f"buffer {ident}: non-finite queue at t={t1:.9g}")
                        if obj.last_empty_time is not None:
                            events.append((obj.last_empty_time, ident, "empty"))
                        if obj.q > 0 and not was_busy[ident]:
                            events.append((t0, ident, "congest"))
                        was_busy[ident] = obj.q > 0
                    elif approx:
                        rates[ident] = self._approx_step(obj, t0, t1, w_next[ident], prop[ident],
                                                         tau_now[ident] if model == "joint" else obj.mu, model)
                    else:
                        before = len(obj.events)
                        sent = step_user(obj, t0, t1, w_next[ident])
                        for te, kind_ev in obj.events[before:]:
                            events.append((te, ident, kind_ev))
                        rates[ident] = (sent / dt, obj.acked_last / dt)
                st.t = t1
                self._measure(t1)
                if (k + 1) % cfg.record_every == 0 or k + 1 == n:
                    rec.row(t1, self._row(t1, rates))
                if (k + 1) % cfg.check_every == 0 or k + 1 == n:
                    checks.append(self._check(t1))
                if cfg.prune and (k + 1) % prune_every == 0:
                    self._prune(t1)
        except FluidError as exc:
            exc.partial = rec.build(self.scenario.name + "-partial", meta=self._meta(checks, wall), events=events)
            raise
        trace = rec.build(self.scenario.name, meta=self._meta(checks, wall), events=events)
        if model == "static":
            self._static_overlay(trace)
        return trace

    def _approx_step(self, us: UserState, t0, t1, w_next, T, tau, model) -> tuple[float, float]:
        dt = t1 - t0
        acked = us.ack_flow.integrate(t0, t1)
        dw = w_next - us.w
        rtt = T + tau
        if not rtt > 0:
            raise SolverError(f"user {us.id}: zero round-trip time")
        amount = w_next / rtt * dt
        if model == "joint":
            amount = max(amount + dw, 0.0)
        us.send_flow.append_amount(t1, amount)
        us.w = w_next
        us.sent_total += amount
        us.acked_total += acked
        us.acked_last = acked
        us.flight += amount - acked
        return amount / dt, acked / dt

    def _prune(self, t: float) -> None:
        st = self.state
        h = min(self._back.values(), default=t)
        for buf in st.buffers.values():
            h = min(h, buf.g(t))
        h = min(h, t - self.max_delay) - 0.1 - 10 * self.config.dt
        if h <= 0:
            return
        for buf in st.buffers.values():
            buf.prune(h)
        for us in st.users.values():
            if h > us.send_flow.horizon:
                us.send_flow.prune(min(h, us.send_flow.now))

    # -- diagnostics ----------------------------------------------------------------

    def _check(self, t: float) -> dict:
        res = conservation_residuals(self, t)
        res["t"] = t
        return res

    def _meta(self, checks, wall) -> dict:
        cfg = self.config
        return {
            "scenario": self.scenario.name,
            "model": cfg.model,
            "init": cfg.init,
            "dt": cfg.dt,
            "t_end": cfg.t_end,
            "capacity": {b: buf.capacity for b, buf in self.graph.buffers.items()},
            "equilibrium": None if self.eq is None else {"tau": self.eq.tau, "rate": self.eq.rate,
                                                         "queue": self.eq.queue},
            "conservation": checks,
            "runtime_s": _time.perf_counter() - wall,
        }

    def _static_overlay(self, trace: TraceSet) -> None:
        g, sc = self.graph, self.scenario
        if len(g.buffers) != 1:
            trace.meta["static_warning"] = "static-link delay is only overlaid on single-buffer scenarios"
            log.warning("%s: %s", sc.name, trace.meta["static_warning"])
            return
        (b,) = g.buffers
        c = g.buffers[b].capacity
        warn = []
        if not g.is_homogeneous():
            warn.append("heterogeneous delays")
        if sc.cross_traffic:
            warn.append("cross-traffic present")
        if warn:
            trace.meta["static_warning"] = "static-link model outside its exactness conditions: " + ", ".join(warn)
            log.warning("%s: %s", sc.name, trace.meta["static_warning"])
        users = [u for u in g.circuits if b in g.circuits[u].buffers]
        w = {u: trace[f"{u}.w"] for u in users}
        tf = {u: g.circuits[u].delay_to(b) for u in users}
        tau0 = float(trace[f"{b}.tau"][0])
        total_w0 = sum(float(v[0]) for v in w.values())
        if tau0 > 0:
            T_off = total_w0 / c - tau0
        else:
            T_off = float(np.mean([g.circuits[u].total_delay for u in users]))
        trace.columns[f"{b}.tau_static"] = static_link_trace(trace.time, w, tf, c, T_off)
        trace.meta["static_T_offset"] = T_off


def conservation_residuals(sim: Simulation, t: float) -> dict:
    """Packet balance at the current time ``t``.

    ``buffer[b]`` compares the queue with the sum of class backlogs (flow model) or with
    initial content plus input minus output (aggregate, both models).  ``global`` is
    the balance of everything injected against everything delivered or in
    transit.  ``total_sent`` scales the residuals.
    """
    st, g = sim.state, sim.graph
    out: dict[str, Any] = {"buffer": {}, "buffer_class": {}}
    for b, buf in st.buffers.items():
        agg = sum(buf.class_backlog0.values())
        cls_sum = 0.0
        for k in buf.classes:
            d = buf.class_inputs[k].cumulative(t) - buf.class_outputs[k].cumulative(t)
            agg += d
            cls_sum += buf.class_backlog(k)
        out["buffer"][b] = abs(buf.q - agg)
        out["buffer_class"][b] = abs(buf.q - cls_sum) if buf.model == "flow" else None
    injected = delivered = 0.0
    in_channels = 0.0
    total_sent = 0.0
    for u, us in st.users.items():
        circ = g.circuits[u]
        injected += sim.flight0[u] + us.sent_total
        total_sent += us.sent_total + sim.flight0[u]
        delivered += us.acked_total
        if circ.buffers:
            srcs = [us.send_flow] + [st.buffers[b].class_outputs[u] for b in circ.buffers]
            for sig, d in zip(srcs, circ.hop_delays):
                if d > 0:
                    in_channels += sig.integrate(t - d, t)
        else:
            in_channels += us.send_flow.integrate(t - circ.total_delay, t)
    for x, spec in ((x.id, x) for x in sim.scenario.cross_traffic):
        buf = st.buffers[spec.buffer]
        injected += sim.cross_backlog0[x] + buf.class_inputs[x].cumulative(t)
        total_sent += buf.class_inputs[x].cumulative(t)
        delivered += buf.class_outputs[x].cumulative(t)
    queued = sum(buf.q for buf in st.buffers.values())
    out["global"] = abs(injected - delivered - queued - in_channels)
    out["total_sent"] = total_sent
    return out


def simulate(scenario: Scenario, config: SimulationConfig | None = None, graph: NetworkGraph | None = None,
             **overrides) -> TraceSet:
    """Run ``scenario`` and return its traces.  Keyword overrides go to the config."""
    cfg = config or SimulationConfig()
    if overrides:
        cfg = SimulationConfig(**{**cfg.__dict__, **overrides})
    return Simulation(scenario, cfg, graph).run()
