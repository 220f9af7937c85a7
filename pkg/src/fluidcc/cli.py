"""Command-line entry point: run scenarios and write CSV traces.

    fluidcc run scenario1 --model all --out results/
    fluidcc run my.toml --model flow,packet --dt 1e-4 --t-end 10
    fluidcc dump scenario3 > scenario3.toml
    fluidcc list

Exit status is 0 on success, 1 for invalid input and 2 when a simulation
fails (partial traces are still written).
"""

from __future__ import annotations

import argparse
import csv
import itertools
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .errors import FluidError, ScenarioError, TopologyError
from .packet import run_packet_sim
from .scenario import BUILTINS, Scenario, dumps_scenario, load_scenario
from .solver import SimulationConfig, simulate
from .traces import TraceSet

log = logging.getLogger("fluidcc")

OUT_ENV = "FLUIDCC_OUT"
DEFAULT_OUT = "fluidcc-out"
ALL_MODELS = ("flow", "pseudo_queue", "ratio", "joint", "static", "packet")
ALIASES = {"pseudo": "pseudo_queue", "pseudo-queue": "pseudo_queue", "oracle": "packet", "exact": "flow"}

EXIT_OK, EXIT_INVALID, EXIT_SOLVER = 0, 1, 2


def parse_models(text: str) -> list[str]:
    out: list[str] = []
    for part in text.split(","):
        name = part.strip().lower()
        if not name:
            continue
        if name == "all":
            out.extend(m for m in ALL_MODELS if m not in out)
            continue
        name = ALIASES.get(name, name)
        if name not in ALL_MODELS:
            raise ValueError(f"unknown model {part.strip()!r}; expected one of {', '.join(ALL_MODELS)}, all")
        if name not in out:
            out.append(name)
    if not out:
        raise ValueError("no model selected")
    return out


def run_model(scenario: Scenario, model: str, dt: float | None, t_end: float | None, init: str | None,
              record_every: int = 1) -> TraceSet:
    if model == "packet":
        return run_packet_sim(scenario, dt=dt, t_end=t_end, init=init, record_every=record_every)
    cfg = SimulationConfig(dt=dt, t_end=t_end, model=model, init=init, record_every=record_every)
    return simulate(scenario, cfg)


def _job(args):
    scenario, model, dt, t_end, init, record_every, out_dir = args
    target = Path(out_dir) / model
    try:
        trace = run_model(scenario, model, dt, t_end, init, record_every)
    except FluidError as exc:
        partial = getattr(exc, "partial", None)
        if partial is not None:
            partial.to_csv(target)
        return model, None, f"{type(exc).__name__}: {exc}"
    trace.to_csv(target)
    return model, trace, None


def queue_series(trace: TraceSet, model: str) -> dict[str, np.ndarray]:
    """Queue size per buffer; for the static-link model, its closed-form delay times capacity."""
    out = {}
    for elem in trace.elements:
        col = f"{elem}.q"
        if col not in trace:
            continue
        if model == "static" and f"{elem}.tau_static" in trace:
            out[elem] = trace[f"{elem}.tau_static"] * trace.meta["capacity"][elem]
        else:
            out[elem] = trace[col]
    return out


def write_summary(path: Path, traces: dict[str, TraceSet]) -> None:
    rows = []
    series = {m: (t.time, queue_series(t, m)) for m, t in traces.items()}
    for a, b in itertools.combinations(list(traces), 2):
        ta, qa = series[a]
        tb, qb = series[b]
        for elem in qa:
            if elem not in qb:
                continue
            vb = np.interp(ta, tb, qb[elem])
            dev = float(np.nanmax(np.abs(qa[elem] - vb)))
            rows.append((a, b, f"{elem}.q", dev))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["model_a", "model_b", "column", "max_abs_deviation"])
        for r in rows:
            w.writerow([r[0], r[1], r[2], format(r[3], ".9g")])


def cmd_run(ns) -> int:
    try:
        scenario = load_scenario(ns.scenario)
        models = parse_models(ns.model)
        if ns.dt is not None and not ns.dt > 0:
            raise ValueError("--dt must be > 0")
        if ns.t_end is not None and not ns.t_end > 0:
            raise ValueError("--t-end must be > 0")
    except (ScenarioError, TopologyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    base = Path(ns.out or os.environ.get(OUT_ENV) or DEFAULT_OUT) / scenario.name
    base.mkdir(parents=True, exist_ok=True)
    jobs = [(scenario, m, ns.dt, ns.t_end, ns.init, ns.record_every, str(base)) for m in models]
    workers = min(len(jobs), ns.jobs or (os.cpu_count() or 1))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    traces, failed = {}, []
    for model, trace, err in results:
        if err is not None:
            print(f"{scenario.name}/{model}: simulation failed: {err}", file=sys.stderr)
            failed.append(model)
        else:
            traces[model] = trace
            print(f"{scenario.name}/{model}: wrote {base / model}")
    if len(traces) > 1:
        write_summary(base / "summary.csv", traces)
        print(f"{scenario.name}: wrote {base / 'summary.csv'}")
    return EXIT_SOLVER if failed else EXIT_OK


def cmd_dump(ns) -> int:
    try:
        text = dumps_scenario(load_scenario(ns.scenario))
    except (ScenarioError, TopologyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if ns.output:
        Path(ns.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_list(ns) -> int:
    for name, sc in BUILTINS.items():
        print(f"{name:20s} {sc.description}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fluidcc", description="Fluid and packet-level congestion-control simulation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario file or built-in")
    r.add_argument("scenario", help="path to a TOML scenario or a built-in name (see 'list')")
    r.add_argument("--model", default="flow",
                   help="comma-separated: flow, pseudo, ratio, joint, static, packet, or all (default: flow)")
    r.add_argument("--dt", type=float, default=None, help="solver step and sampling period in seconds")
    r.add_argument("--t-end", type=float, default=None, help="simulated duration in seconds")
    r.add_argument("--init", choices=("equilibrium", "empty"), default=None)
    r.add_argument("--record-every", type=int, default=1, help="keep every n-th sample")
    r.add_argument("--out", default=None, help=f"output directory (default: ${OUT_ENV} or ./{DEFAULT_OUT})")
    r.add_argument("--jobs", type=int, default=None, help="parallel runs when several models are selected")
    r.set_defaults(func=cmd_run)

    d = sub.add_parser("dump", help="print the canonical TOML form of a scenario")
    d.add_argument("scenario")
    d.add_argument("-o", "--output", default=None)
    d.set_defaults(func=cmd_dump)

    ls = sub.add_parser("list", help="list built-in scenarios")
    ls.set_defaults(func=cmd_list)
    return p


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return ns.func(ns)


if __name__ == "__main__":
    sys.exit(main())
