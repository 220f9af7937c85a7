"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line (printed in the terminal summary) and then
asserts.  Independent reference values are computed here, not by the package.
"""

import math
from bisect import bisect_right
from itertools import combinations

import numpy as np
import pytest
from scipy.optimize import root

from conftest import ALL_SCENARIOS, fluid_run, packet_run
from fluidcc import builtin, simulate
from fluidcc.buffer import BufferState
from fluidcc.packet import silent_periods
from fluidcc.scenario import Scenario


def report(acceptance, k, checks):
    """checks: list of (name, ok, detail)."""
    ok = all(c[1] for c in checks)
    detail = "; ".join(f"{n}={'ok' if o else 'FAIL'} ({d})" for n, o, d in checks)
    acceptance[k] = (ok, detail)
    print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# -- independent references ------------------------------------------------------


def reference_equilibrium(sc: Scenario, windows: dict) -> dict:
    """Queue sizes (packets) where every congested buffer carries exactly its spare
    capacity, found by enumerating which buffers are congested."""
    g = sc.graph()
    bufs = list(g.buffers)
    frac = {x.buffer: x.value(0.0) for x in sc.cross_traffic}
    cap = {b: g.buffers[b].capacity for b in bufs}
    paths = {u: g.circuits[u].buffers for u in g.circuits}
    T = {u: g.circuits[u].total_delay for u in g.circuits}

    def load(tau):
        td = dict(zip(bufs, tau))
        rate = {u: windows[u] / (T[u] + sum(td[b] for b in paths[u])) for u in paths}
        return {b: sum(rate[u] for u in paths if b in paths[u]) for b in bufs}

    for n_active in range(len(bufs) + 1):
        for active in combinations(bufs, n_active):
            # congested delays are written exp(y) so the search stays on tau > 0
            def delays(y):
                return [math.exp(y[active.index(b)]) if b in active else 0.0 for b in bufs]

            def eqs(y):
                ld = load(delays(y))
                return [ld[b] / (cap[b] * (1 - frac.get(b, 0.0))) - 1.0 for b in active]

            y = []
            if active:
                sol = root(eqs, [math.log(sum(windows.values()) / cap[b]) for b in active], tol=1e-13)
                if np.max(np.abs(sol.fun)) > 1e-11:
                    continue
                y = sol.x
            tau = delays(y)
            ld = load(tau)
            if all(ld[b] <= cap[b] * (1 - frac.get(b, 0.0)) * (1 + 1e-9) for b in bufs):
                return {b: t * cap[b] for b, t in zip(bufs, tau)}
    raise AssertionError("no equilibrium found")


def final_windows(sc):
    return {u.id: u.script.value(math.inf) for u in sc.users}


def warmup(trace):
    return 2 * max(float(np.max(trace[f"{u}.rtt"])) for u in trace.elements if f"{u}.rtt" in trace)


def queue_checks(name, buffers):
    """Deviation and post-step equilibrium checks for one scenario."""
    sc = builtin(name)
    _, ft = fluid_run(name)
    pt = packet_run(name)
    t0 = warmup(ft)
    q_ref = reference_equilibrium(sc, final_windows(sc))
    out = []
    mask = ft.time >= t0
    tail = ft.time >= ft.time[-1] - 0.5
    for b in buffers:
        qf = ft[f"{b}.q"][mask]
        qp = np.interp(ft.time[mask], pt.time, pt[f"{b}.q"])
        dev = float(np.max(np.abs(qf - qp)))
        bound = max(5.0, 0.02 * q_ref[b])
        out.append((f"{name}.{b}.dev", dev <= bound, f"{dev:.3g} <= {bound:.3g}"))
        settle = float(np.max(np.abs(ft[f"{b}.q"][tail] - q_ref[b])))
        out.append((f"{name}.{b}.eq", settle <= 1.0, f"|q-q*|={settle:.3g}, q*={q_ref[b]:.1f}"))
    rt = ft.meta["runtime_s"]
    out.append((f"{name}.runtime", rt < 30.0, f"{rt:.1f}s"))
    return out


# -- criteria -------------------------------------------------------------------


def test_criterion_1_square_wave(acceptance):
    _, ft = fluid_run("squarewave")
    _, pq = fluid_run("squarewave", "pseudo_queue")
    pt = packet_run("squarewave")
    c = ft.meta["capacity"]["b1"]
    dt = ft.meta["dt"]
    checks = []

    out1 = ft["b1.out.x1"]
    amp = (out1.max() - out1.min()) / 2
    checks.append(("amplitude", abs(amp - c / 2) <= 1e-6 * c, f"{amp:.6g} vs c/2={c / 2:.6g}"))
    on_levels = np.mean((np.abs(out1) <= 1e-6 * c) | (np.abs(out1 - c) <= 1e-6 * c))
    checks.append(("two-level", on_levels >= 0.99, f"{on_levels:.4f} of samples at 0 or c"))

    s = np.sign(out1 - c / 2)
    idx = np.nonzero(s[1:] != s[:-1])[0]
    times = (ft.time[idx] + ft.time[idx + 1]) / 2
    rising = times[s[idx + 1] > 0]
    falling = times[s[idx + 1] < 0]
    periods = np.concatenate([np.diff(rising), np.diff(falling)])
    worst = float(np.max(np.abs(periods - 2.0))) if periods.size else math.inf
    checks.append(("period", periods.size >= 4 and worst <= 2 * dt, f"{periods.size} periods, max |P-2| = {worst:.2g}s"))

    amps = []
    for n in range(2, int(pq.time[-1])):
        m = (pq.time >= n) & (pq.time < n + 1)
        amps.append(max(float(np.max(np.abs(pq[f"b1.out.{k}"][m] - c / 2))) for k in ("x1", "x2")))
    shrinking = all(a1 < a0 for a0, a1 in zip(amps, amps[1:]))
    checks.append(("pseudo-shrink", shrinking and amps[-1] < amps[0],
                   "amplitudes " + ", ".join(f"{a / c:.3f}c" for a in amps)))

    t_idx = np.arange(0, ft.time.size, 10)
    worst = 0.0
    for k in ("x1", "x2"):
        for side, col in (("+", "cum_out"), ("-", "cum_in")):
            stairs = pt.crossings[f"b1{side}.{k}"]
            fl = ft[f"b1.{col}.{k}"][t_idx]
            pk = np.array([bisect_right(stairs, t) for t in ft.time[t_idx]], dtype=float)
            worst = max(worst, float(np.max(np.abs(fl - pk))))
    checks.append(("cumulative", worst <= 2.0, f"max {worst:.3g} packets"))
    rt = ft.meta["runtime_s"]
    checks.append(("runtime", rt < 5.0, f"{rt:.2f}s"))
    report(acceptance, 1, checks)


def test_criterion_2_single_bottleneck(acceptance):
    checks = queue_checks("scenario1", ["b1"]) + queue_checks("scenario2", ["b1"])
    report(acceptance, 2, checks)


def test_criterion_3_series(acceptance):
    checks = []
    for name in ("scenario3", "scenario4", "scenario5", "scenario6"):
        checks += queue_checks(name, ["b1", "b2"])
    for name in ("scenario5", "scenario6"):
        sc = builtin(name)
        sim, ft = fluid_run(name)
        g = sc.graph()
        (stepper,) = [u.id for u in sc.users if u.window_steps]
        t_step = sc.user(stepper).window_steps[0][0]
        circ = g.circuits[stepper]
        # propagation to buffer 2 plus the queuing delay of every buffer before it
        earliest = t_step + circ.delay_to("b2")
        for b in circ.buffers[: circ.buffers.index("b2")]:
            earliest += ft.at(f"{b}.tau", t_step)
        q2 = ft["b2.q"]
        i0 = int(np.searchsorted(ft.time, t_step))
        moved = np.nonzero(np.abs(q2[i0:] - q2[i0]) > 1e-6)[0]
        t_dev = float(ft.time[i0 + moved[0]]) if moved.size else math.inf
        ok = earliest - 1e-9 <= t_dev <= earliest + 5 * ft.meta["dt"]
        checks.append((f"{name}.causality", ok, f"first move {t_dev:.5f}s, earliest {earliest:.5f}s"))
    report(acceptance, 3, checks)


def test_criterion_4_window_halving(acceptance):
    checks = []
    for name in ("scenario7", "scenario8"):
        sc = builtin(name)
        _, ft = fluid_run(name)
        pt = packet_run(name)
        spec = sc.user("u1")
        t_step, w_new = spec.window_steps[0]
        retained = spec.window - w_new
        c = ft.meta["capacity"]["b1"]
        delta = sum(x.value(0.0) for x in sc.cross_traffic)
        ack_rate = c * (1 - delta)
        closed = retained / ack_rate

        pi, send = ft["u1.pi"], ft["u1.send"]
        zero_ok = bool(np.all(send[pi < 0] == 0.0)) and bool(np.any(pi < 0))
        checks.append((f"{name}.silent", zero_ok, f"{int(np.sum(pi < 0))} samples with pi<0, all send==0"))

        resumes = [t for t in ft.events_of("u1", "resume") if t > t_step]
        t_res = resumes[0] if resumes else math.inf
        err = abs((t_res - t_step) - closed) / closed
        checks.append((f"{name}.resume", err <= 0.02, f"{t_res - t_step:.5f}s vs {closed:.5f}s ({err:.2%})"))

        gaps = [g for g in silent_periods(pt, "u1", after=t_step - 0.1) if g[1] > t_step]
        dur = gaps[0][1] - t_step if gaps else math.inf
        err_p = abs(dur - closed) / closed
        checks.append((f"{name}.oracle-silence", err_p <= 0.02, f"{dur:.5f}s vs {closed:.5f}s ({err_p:.2%})"))
        checks += [c for c in queue_checks(name, ["b1"]) if not c[0].endswith("runtime")]
    report(acceptance, 4, checks)


def test_criterion_5_static_link(acceptance):
    checks = []
    _, st = fluid_run("static_homogeneous", "static")
    m = st.time >= warmup(st)
    dev = float(np.max(np.abs(st["b1.tau"][m] - st["b1.tau_static"][m])))
    checks.append(("homogeneous", dev <= 1e-6, f"max |tau - tau_static| = {dev:.3g}s"))

    _, s1 = fluid_run("scenario1", "static")
    _, ex = fluid_run("scenario1")
    pt = packet_run("scenario1")
    c = s1.meta["capacity"]["b1"]
    m = (s1.time >= 3.0) & (s1.time <= 4.0)
    tau_o = np.interp(s1.time[m], pt.time, pt["b1.q"]) / c
    d_static = float(np.max(np.abs(s1["b1.tau_static"][m] - tau_o)))
    d_exact = float(np.max(np.abs(ex["b1.tau"][m] - tau_o)))
    ratio = d_static / d_exact
    checks.append(("ranking", ratio >= 5.0, f"static {d_static * 1e3:.3g}ms vs exact {d_exact * 1e3:.3g}ms, x{ratio:.1f}"))
    report(acceptance, 5, checks)


SMOOTH_C = 1000.0


def _smooth_buffer(dt, mean, amp, t_end=2.0):
    c = SMOOTH_C

    def Phi(t):
        return c * (mean * t - amp * math.cos(2 * math.pi * t) / (2 * math.pi))

    b = BufferState("b", c, ["a"], q0=0.0, initial_rates={"a": 0.0})
    for k in range(int(round(t_end / dt))):
        b.step((k + 1) * dt, {"a": Phi((k + 1) * dt) - Phi(k * dt)})
    return b, (lambda t: c * (mean + amp * math.sin(2 * math.pi * t)))


def derivative_errors(dt, mean=1.2, amp=0.5, points=(0.6, 1.1, 1.7)):
    """Worst gap between central differences of the simulated maps and the
    closed-form slopes evaluated with the exact input at the simulated entry time."""
    b, phi = _smooth_buffer(dt, mean, amp)
    c = SMOOTH_C
    h = dt
    ef = eg = et = 0.0
    for t in points:
        congested = mean + amp > 1.0
        fd_f = (b.f(t + h) - b.f(t - h)) / (2 * h)
        ef = max(ef, abs(fd_f - (phi(t) / c if congested else 1.0)))
        gp = c / phi(b.g(t)) if congested else 1.0
        fd_g = (b.g(t + h) - b.g(t - h)) / (2 * h)
        eg = max(eg, abs(fd_g - gp))

        def tg(x):
            return b.tau_at(b.g(x))

        fd_t = (tg(t + h) - tg(t - h)) / (2 * h)
        et = max(et, abs(fd_t - (1.0 - gp if congested else 0.0)))
    return ef, eg, et


def test_criterion_6_operator_identities(acceptance):
    checks = []
    worst_b = worst_u = 0.0
    for name in ALL_SCENARIOS:
        sim, ft = fluid_run(name)
        ids = ft.meta["identities"]
        dt = ft.meta["dt"]
        for b, r in ids["buffer"].items():
            bound = 1e-9 + 2 * dt * ids["fprime_max"][b]
            worst_b = max(worst_b, r / bound)
        for u, r in ids["user"].items():
            fp = max([ids["fprime_max"][b] for b in sim.graph.circuits[u].buffers], default=1.0)
            worst_u = max(worst_u, r / (1e-9 + 2 * dt * fp))
    checks.append(("f(g(t))=t", worst_b <= 1.0, f"worst residual/bound {worst_b:.2g}"))
    checks.append(("F(B(t))=t", worst_u <= 1.0, f"worst residual/bound {worst_u:.2g}"))

    dts = [1e-3, 1e-4, 1e-5]
    errs = np.array([derivative_errors(dt) for dt in dts])
    for j, label in enumerate(("f'", "g'", "[tau(g)]'")):
        slope = np.polyfit(np.log(dts), np.log(errs[:, j]), 1)[0]
        checks.append((label, slope >= 0.9, f"slope {slope:.2f}, errors " + ", ".join(f"{e:.2g}" for e in errs[:, j])))
    unc = max(max(derivative_errors(dt, mean=0.5, amp=0.3)) for dt in dts)
    checks.append(("uncongested", unc <= 1e-6, f"max error {unc:.2g}"))
    report(acceptance, 6, checks)


def test_criterion_7_conservation(acceptance):
    checks = []
    for model in ("flow", "pseudo_queue"):
        worst = 0.0
        where = ""
        for name in ALL_SCENARIOS:
            _, tr = fluid_run(name, model)
            checks_ = tr.meta["conservation"]
            total = max(checks_[-1]["total_sent"], 1.0)
            for rec in checks_:
                vals = list(rec["buffer"].values()) + [rec["global"]]
                if model == "flow":
                    vals += list(rec["buffer_class"].values())
                r = max(vals) / total
                if r > worst:
                    worst, where = r, f"{name} t={rec['t']:.3g}"
        checks.append((model, worst <= 1e-6, f"worst residual {worst:.2g} x total sent ({where or 'none'})"))
    report(acceptance, 7, checks)


def test_criterion_8_convergence(acceptance):
    sc = builtin("scenario1")
    pt = packet_run("scenario1")
    devs = {}
    for dt in (2e-4, 1e-4):
        tr = simulate(sc, dt=dt)
        m = tr.time >= warmup(tr)
        qp = np.interp(tr.time[m], pt.time, pt["b1.q"])
        devs[dt] = float(np.max(np.abs(tr["b1.q"][m] - qp)))
    factor = devs[2e-4] / devs[1e-4]
    ok = factor >= 1.8 or devs[1e-4] < 1.0
    report(acceptance, 8, [("halving", ok, f"dev(2e-4)={devs[2e-4]:.3g}, dev(1e-4)={devs[1e-4]:.3g}, "
                                           f"factor {factor:.2f}")])
