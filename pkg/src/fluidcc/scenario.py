"""Scenario files (TOML) and the built-in scenario library.

A scenario file has the sections ``[scenario]``, ``[traffic]``, ``[run]``
and the arrays of tables ``[[buffer]]``, ``[[user]]``, ``[[channel]]`` and
``[[cross_traffic]]``.  Unknown keys are rejected.  Capacities are in bits
per second and are converted to packets per second with the packet size.
See ``README.md`` for a complete example.
"""

from __future__ import annotations

import math
import re
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ScenarioError, TopologyError
from .signal import FlowSignal
from .topology import Buffer, Channel, CrossTraffic, NetworkGraph, User, build_graph
from .user import WindowScript

__all__ = [
    "Scenario",
    "UserSpec",
    "BufferSpec",
    "ChannelSpec",
    "CrossTrafficSpec",
    "RunSpec",
    "load_scenario",
    "loads_scenario",
    "dump_scenario",
    "dumps_scenario",
    "builtin",
    "BUILTINS",
    "MODELS",
]

MODELS = ("flow", "pseudo_queue", "ratio", "joint", "static")
INIT_MODES = ("equilibrium", "empty")


@dataclass(frozen=True)
class UserSpec:
    id: str
    window: float
    window_steps: tuple[tuple[float, float], ...] = ()
    path: tuple[str, ...] | None = None

    @property
    def script(self) -> WindowScript:
        return WindowScript(self.window, self.window_steps)


@dataclass(frozen=True)
class BufferSpec:
    id: str
    capacity_bps: float
    tau0: float | None = None


@dataclass(frozen=True)
class ChannelSpec:
    src: str
    dst: str
    delay: float = 0.0


@dataclass(frozen=True)
class CrossTrafficSpec:
    """Exogenous flow at a buffer, as a fraction of its capacity.

    ``samples`` are ``(time, fraction)`` pairs, each fraction holding until
    the next sample.  With ``period`` set the pattern repeats.  Role
    ``"cross"`` is background traffic (fraction in ``[0, 1)``); role
    ``"source"`` is an open-loop input flow of any nonnegative size.
    """

    id: str
    buffer: str
    samples: tuple[tuple[float, float], ...]
    period: float | None = None
    role: str = "cross"

    def value(self, t: float) -> float:
        s = self.samples
        if self.period is not None:
            t = math.fmod(t, self.period)
            if t < 0:
                t += self.period
        v = s[0][1]
        for ts, x in s:
            if ts <= t:
                v = x
            else:
                break
        return v

    def breakpoints(self, t_end: float) -> list[tuple[float, float]]:
        """Time-ordered ``(t, fraction)`` pieces covering ``[0, t_end]``."""
        if self.period is None:
            pts = [(max(t, 0.0), v) for t, v in self.samples if t < t_end]
            return pts or [(0.0, self.samples[0][1])]
        pts = []
        k = 0
        while k * self.period < t_end:
            base = k * self.period
            pts.extend((base + t, v) for t, v in self.samples if base + t < t_end)
            k += 1
        return pts

    def signal(self, capacity: float, t_end: float, *, prehistory_rate: float | None = None) -> FlowSignal:
        """Rate ``capacity * fraction`` as a signal."""
        pts = self.breakpoints(t_end)
        merged: list[tuple[float, float]] = []
        for t, v in pts:
            if merged and abs(merged[-1][0] - t) < 1e-15:
                merged[-1] = (t, v)
            elif not merged or merged[-1][1] != v:
                merged.append((t, v))
        if merged[0][0] > 0:
            merged.insert(0, (0.0, self.samples[0][1]))
        return FlowSignal.from_samples([(t, capacity * v) for t, v in merged],
                                       prehistory_rate=prehistory_rate, name=self.id)


@dataclass(frozen=True)
class RunSpec:
    dt: float = 1e-4
    t_end: float = 10.0
    model: str = "flow"
    init: str = "equilibrium"
    deterministic: bool = True


@dataclass(frozen=True)
class Scenario:
    name: str
    packet_size_bytes: float
    buffers: tuple[BufferSpec, ...]
    users: tuple[UserSpec, ...] = ()
    channels: tuple[ChannelSpec, ...] = ()
    cross_traffic: tuple[CrossTrafficSpec, ...] = ()
    run: RunSpec = field(default_factory=RunSpec)
    description: str = ""

    def __post_init__(self):
        validate(self)

    def to_packets(self, bits_per_second: float) -> float:
        return bits_per_second / (self.packet_size_bytes * 8.0)

    def capacity(self, buffer_id: str) -> float:
        """Capacity of ``buffer_id`` in packets/second."""
        for b in self.buffers:
            if b.id == buffer_id:
                return self.to_packets(b.capacity_bps)
        raise KeyError(buffer_id)

    def user(self, uid: str) -> UserSpec:
        for u in self.users:
            if u.id == uid:
                return u
        raise KeyError(uid)

    def graph(self) -> NetworkGraph:
        return build_graph(
            [User(u.id, u.path) for u in self.users],
            [Buffer(b.id, self.to_packets(b.capacity_bps), b.tau0) for b in self.buffers],
            [Channel(c.src, c.dst, c.delay) for c in self.channels],
            [CrossTraffic(x.id, x.buffer, x.role) for x in self.cross_traffic],
        )

    def with_run(self, **kw) -> "Scenario":
        return replace(self, run=replace(self.run, **kw))


def validate(s: Scenario) -> None:
    if not (isinstance(s.packet_size_bytes, (int, float)) and s.packet_size_bytes > 0):
        raise ScenarioError("must be > 0", "traffic.packet_size_bytes")
    for i, b in enumerate(s.buffers):
        if not b.capacity_bps > 0:
            raise ScenarioError("must be > 0", f"buffer[{i}].capacity_bps")
        if b.tau0 is not None and b.tau0 < 0:
            raise ScenarioError("must be >= 0", f"buffer[{i}].tau0")
    for i, u in enumerate(s.users):
        try:
            u.script
        except ValueError as exc:
            raise ScenarioError(str(exc), f"user[{i}].window") from None
    for i, c in enumerate(s.channels):
        if not c.delay >= 0 or not math.isfinite(c.delay):
            raise ScenarioError("must be finite and >= 0", f"channel[{i}].delay")
    for i, x in enumerate(s.cross_traffic):
        if x.role not in ("cross", "source"):
            raise ScenarioError(f"unknown role {x.role!r}", f"cross_traffic[{i}].role")
        if not x.samples:
            raise ScenarioError("needs at least one sample", f"cross_traffic[{i}].samples")
        times = [t for t, _ in x.samples]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ScenarioError("sample times must be strictly increasing", f"cross_traffic[{i}].samples")
        for _, v in x.samples:
            if v < 0 or not math.isfinite(v) or (x.role == "cross" and v >= 1):
                bound = "[0, 1)" if x.role == "cross" else ">= 0"
                raise ScenarioError(f"fraction {v!r} outside {bound}", f"cross_traffic[{i}].samples")
        if x.period is not None and not (x.period > 0 and times[-1] < x.period and times[0] >= 0):
            raise ScenarioError("period must be > 0 and exceed every sample time", f"cross_traffic[{i}].period")
    r = s.run
    if not r.dt > 0:
        raise ScenarioError("must be > 0", "run.dt")
    if not r.t_end > 0:
        raise ScenarioError("must be > 0", "run.t_end")
    if r.model not in MODELS:
        raise ScenarioError(f"unknown model {r.model!r}; expected one of {', '.join(MODELS)}", "run.model")
    if r.init not in INIT_MODES:
        raise ScenarioError(f"unknown init {r.init!r}; expected one of {', '.join(INIT_MODES)}", "run.init")
    try:
        s.graph()
    except TopologyError as exc:
        raise ScenarioError(str(exc), "topology") from None


# -- TOML ------------------------------------------------------------------------

_SECTIONS = {
    "scenario": {"name", "description"},
    "traffic": {"packet_size_bytes"},
    "run": {"dt", "t_end", "model", "init", "deterministic"},
}
_ARRAYS = {
    "buffer": {"id", "capacity_bps", "tau0"},
    "user": {"id", "window", "window_steps", "path"},
    "channel": {"src", "dst", "delay"},
    "cross_traffic": {"id", "buffer", "samples", "period", "role"},
}
_REQUIRED = {
    "buffer": {"id", "capacity_bps"},
    "user": {"id", "window"},
    "channel": {"src", "dst"},
    "cross_traffic": {"id", "buffer", "samples"},
}


def _header_lines(text: str) -> dict[tuple[str, int], int]:
    """Map ``(table, index)`` to the line of its header; ``index`` is -1 for plain tables."""
    found: dict[tuple[str, int], int] = {}
    counts: dict[str, int] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        m = re.match(r"\s*\[\[\s*([A-Za-z_]+)\s*\]\]", line)
        if m:
            name = m.group(1)
            k = counts.get(name, 0)
            found[(name, k)] = n
            counts[name] = k + 1
            continue
        m = re.match(r"\s*\[\s*([A-Za-z_]+)\s*\]", line)
        if m:
            found[(m.group(1), -1)] = n
    return found


def _key_line(text: str, header: int | None, key: str) -> int | None:
    """Line of ``key = ...`` inside the table whose header is on line ``header``."""
    if header is None:
        return None
    lines = text.splitlines()
    pat = re.compile(rf"\s*{re.escape(key)}\s*=")
    for n in range(header, len(lines)):
        line = lines[n]
        if re.match(r"\s*\[", line):
            break
        if pat.match(line):
            return n + 1
    return header


def _num(v, fld, line) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ScenarioError(f"expected a number, got {v!r}", fld, line)
    return float(v)


def _str(v, fld, line) -> str:
    if not isinstance(v, str) or not v:
        raise ScenarioError(f"expected a non-empty string, got {v!r}", fld, line)
    return v


def _pairs(v, fld, line) -> tuple[tuple[float, float], ...]:
    if not isinstance(v, list):
        raise ScenarioError("expected a list of [time, value] pairs", fld, line)
    out = []
    for p in v:
        if not isinstance(p, list) or len(p) != 2:
            raise ScenarioError(f"expected a [time, value] pair, got {p!r}", fld, line)
        out.append((_num(p[0], fld, line), _num(p[1], fld, line)))
    return tuple(out)


def loads_scenario(text: str, source: str = "<string>") -> Scenario:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ScenarioError(f"{source}: {exc}", None, int(m.group(1)) if m else None) from None
    lines = _header_lines(text)
    for key, val in doc.items():
        if key in _SECTIONS:
            if not isinstance(val, dict):
                raise ScenarioError("must be a table", key)
            for k in val:
                if k not in _SECTIONS[key]:
                    raise ScenarioError("unknown key", f"{key}.{k}", _key_line(text, lines.get((key, -1)), k))
        elif key in _ARRAYS:
            if not isinstance(val, list):
                raise ScenarioError("must be an array of tables", key)
            for i, tbl in enumerate(val):
                ln = lines.get((key, i))
                for k in tbl:
                    if k not in _ARRAYS[key]:
                        raise ScenarioError("unknown key", f"{key}[{i}].{k}", _key_line(text, ln, k))
                for k in _REQUIRED[key] - set(tbl):
                    raise ScenarioError("missing required key", f"{key}[{i}].{k}", ln)
        else:
            raise ScenarioError("unknown section", key)

    meta = doc.get("scenario", {})
    traffic = doc.get("traffic", {})
    if "packet_size_bytes" not in traffic:
        raise ScenarioError("missing required key", "traffic.packet_size_bytes", lines.get(("traffic", -1)))

    buffers = []
    for i, t in enumerate(doc.get("buffer", [])):
        ln = lines.get(("buffer", i))
        tau0 = t.get("tau0")
        buffers.append(BufferSpec(_str(t["id"], f"buffer[{i}].id", ln),
                                  _num(t["capacity_bps"], f"buffer[{i}].capacity_bps", ln),
                                  None if tau0 is None else _num(tau0, f"buffer[{i}].tau0", ln)))
    users = []
    for i, t in enumerate(doc.get("user", [])):
        ln = lines.get(("user", i))
        path = t.get("path")
        if path is not None:
            if not isinstance(path, list):
                raise ScenarioError("expected a list of buffer ids", f"user[{i}].path", ln)
            path = tuple(_str(p, f"user[{i}].path", ln) for p in path)
        users.append(UserSpec(_str(t["id"], f"user[{i}].id", ln), _num(t["window"], f"user[{i}].window", ln),
                              _pairs(t.get("window_steps", []), f"user[{i}].window_steps", ln), path))
    channels = []
    for i, t in enumerate(doc.get("channel", [])):
        ln = lines.get(("channel", i))
        channels.append(ChannelSpec(_str(t["src"], f"channel[{i}].src", ln), _str(t["dst"], f"channel[{i}].dst", ln),
                                    _num(t.get("delay", 0.0), f"channel[{i}].delay", ln)))
    cross = []
    for i, t in enumerate(doc.get("cross_traffic", [])):
        ln = lines.get(("cross_traffic", i))
        period = t.get("period")
        cross.append(CrossTrafficSpec(
            _str(t["id"], f"cross_traffic[{i}].id", ln), _str(t["buffer"], f"cross_traffic[{i}].buffer", ln),
            _pairs(t["samples"], f"cross_traffic[{i}].samples", ln),
            None if period is None else _num(period, f"cross_traffic[{i}].period", ln),
            _str(t.get("role", "cross"), f"cross_traffic[{i}].role", ln)))
    r = doc.get("run", {})
    rl = lines.get(("run", -1))
    det = r.get("deterministic", True)
    if not isinstance(det, bool):
        raise ScenarioError("expected true or false", "run.deterministic", rl)
    run = RunSpec(
        dt=_num(r.get("dt", 1e-4), "run.dt", rl),
        t_end=_num(r.get("t_end", 10.0), "run.t_end", rl),
        model=_str(r.get("model", "flow"), "run.model", rl),
        init=_str(r.get("init", "equilibrium"), "run.init", rl),
        deterministic=det,
    )
    return Scenario(
        name=str(meta.get("name", Path(source).stem if source != "<string>" else "scenario")),
        description=str(meta.get("description", "")),
        packet_size_bytes=_num(traffic["packet_size_bytes"], "traffic.packet_size_bytes",
                               lines.get(("traffic", -1))),
        buffers=tuple(buffers), users=tuple(users), channels=tuple(channels), cross_traffic=tuple(cross),
        run=run,
    )


def load_scenario(path) -> Scenario:
    """Load a scenario from a TOML file, or a built-in by name."""
    p = Path(path)
    if not p.exists() and str(path) in BUILTINS:
        return builtin(str(path))
    if not p.exists():
        raise ScenarioError(f"{path}: no such file and not a built-in scenario ({', '.join(BUILTINS)})")
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc.strerror}") from None
    return loads_scenario(text, str(p))


def dumps_scenario(s: Scenario) -> str:
    """Canonical TOML text; ``loads_scenario(dumps_scenario(s)) == s``."""
    doc: dict[str, Any] = {
        "scenario": {"name": s.name, "description": s.description},
        "traffic": {"packet_size_bytes": float(s.packet_size_bytes)},
        "run": {"dt": s.run.dt, "t_end": s.run.t_end, "model": s.run.model, "init": s.run.init,
                "deterministic": s.run.deterministic},
    }
    doc["buffer"] = []
    for b in s.buffers:
        t: dict[str, Any] = {"id": b.id, "capacity_bps": float(b.capacity_bps)}
        if b.tau0 is not None:
            t["tau0"] = float(b.tau0)
        doc["buffer"].append(t)
    if s.users:
        doc["user"] = []
        for u in s.users:
            t = {"id": u.id, "window": float(u.window), "window_steps": [[float(a), float(b)] for a, b in u.window_steps]}
            if u.path is not None:
                t["path"] = list(u.path)
            doc["user"].append(t)
    if s.channels:
        doc["channel"] = [{"src": c.src, "dst": c.dst, "delay": float(c.delay)} for c in s.channels]
    if s.cross_traffic:
        doc["cross_traffic"] = []
        for x in s.cross_traffic:
            t = {"id": x.id, "buffer": x.buffer, "samples": [[float(a), float(b)] for a, b in x.samples],
                 "role": x.role}
            if x.period is not None:
                t["period"] = float(x.period)
            doc["cross_traffic"].append(t)
    return tomli_w.dumps(doc)


def dump_scenario(s: Scenario, path) -> None:
    Path(path).write_text(dumps_scenario(s), encoding="utf-8")


# -- built-in library ---------------------------------------------------------------


def _single_buffer(name, description, capacity_bps, packet_size, windows, delays, steps, t_end,
                   cross: float | None = None) -> Scenario:
    users, channels = [], []
    for k, (w, T) in enumerate(zip(windows, delays), start=1):
        uid = f"u{k}"
        users.append(UserSpec(uid, w, tuple(steps.get(uid, ()))))
        channels.append(ChannelSpec(uid, "b1", T / 2))
        channels.append(ChannelSpec("b1", uid, T / 2))
    xs = (CrossTrafficSpec("x1", "b1", ((0.0, cross),)),) if cross else ()
    return Scenario(name=name, description=description, packet_size_bytes=packet_size,
                    buffers=(BufferSpec("b1", capacity_bps),), users=tuple(users), channels=tuple(channels),
                    cross_traffic=xs, run=RunSpec(t_end=t_end))


def _series(name, description, windows, step_user, cross: float | None, t_end=15.0) -> Scenario:
    # u1 crosses both links, u2 only link 2, u3 only link 1; ACK paths are uncongested
    link1, link2 = 0.020, 0.040
    users = (
        UserSpec("u1", windows[0], ((10.0, windows[0] + 200),) if step_user == "u1" else ()),
        UserSpec("u2", windows[1], ((10.0, windows[1] + 200),) if step_user == "u2" else ()),
        UserSpec("u3", windows[2]),
    )
    channels = (
        ChannelSpec("u1", "b1", 0.0),
        ChannelSpec("b1", "b2", link1),
        ChannelSpec("b2", "u1", link2 + link1 + link2),
        ChannelSpec("u2", "b2", 0.0),
        ChannelSpec("b2", "u2", link2 + link2),
        ChannelSpec("u3", "b1", 0.0),
        ChannelSpec("b1", "u3", link1 + link1),
    )
    xs = (CrossTrafficSpec("x1", "b1", ((0.0, cross),)),) if cross else ()
    return Scenario(name=name, description=description, packet_size_bytes=1448,
                    buffers=(BufferSpec("b1", 72e6), BufferSpec("b2", 180e6)), users=users, channels=channels,
                    cross_traffic=xs, run=RunSpec(t_end=t_end))


def _squarewave() -> Scenario:
    # two open-loop inputs at 2c alternating every half second into an empty buffer
    return Scenario(
        name="squarewave",
        description="Two alternating square-wave inputs at twice the capacity into one FIFO buffer",
        packet_size_bytes=1590,
        buffers=(BufferSpec("b1", 100e6, 0.0),),
        cross_traffic=(
            CrossTrafficSpec("x1", "b1", ((0.0, 2.0), (0.5, 0.0)), 1.0, "source"),
            CrossTrafficSpec("x2", "b1", ((0.0, 0.0), (0.5, 2.0)), 1.0, "source"),
        ),
        run=RunSpec(t_end=8.0, init="empty"),
    )


def _build_all() -> dict[str, Scenario]:
    lib = {
        "scenario1": _single_buffer("scenario1", "Two users on one bottleneck; w1 50 -> 150 at 3 s",
                                    100e6, 1590, (50, 550), (0.0032, 0.117), {"u1": [(3.0, 150)]}, 8.0),
        "scenario2": _single_buffer("scenario2", "Two users on one bottleneck; w1 210 -> 300 at 5 s",
                                    100e6, 1590, (210, 750), (0.010, 0.090), {"u1": [(5.0, 300)]}, 16.0),
        "scenario3": _series("scenario3", "Two buffers in series; w1 +200 at 10 s", (1600, 1200, 5), "u1", None),
        "scenario4": _series("scenario4", "Two buffers in series; w2 +200 at 10 s", (1600, 1200, 5), "u2", None),
        "scenario5": _series("scenario5", "Series with cross-traffic c1/2 on buffer 1; w1 +200 at 10 s",
                             (1200, 1600, 5), "u1", 0.5),
        "scenario6": _series("scenario6", "Series with cross-traffic c1/2 on buffer 1; w2 +200 at 10 s",
                             (1200, 1600, 5), "u2", 0.5),
        "scenario7": _single_buffer("scenario7", "One user; window halved at 5 s",
                                    12.5e6, 1040, (500,), (0.150,), {"u1": [(5.0, 250)]}, 8.0),
        "scenario8": _single_buffer("scenario8", "One user with cross-traffic c/2; window halved at 5 s",
                                    25e6, 1040, (500,), (0.150,), {"u1": [(5.0, 250)]}, 8.0, cross=0.5),
        "squarewave": _squarewave(),
        "static_homogeneous": _single_buffer(
            "static_homogeneous", "Two users with identical delays, always congested, windows only increase",
            100e6, 1590, (400, 600), (0.100, 0.100), {"u1": [(2.0, 600)], "u2": [(4.0, 700)]}, 6.0),
    }
    return lib


BUILTINS = _build_all()


def builtin(name: str) -> Scenario:
    try:
        return BUILTINS[name]
    except KeyError:
        raise ScenarioError(f"unknown built-in scenario {name!r}; available: {', '.join(BUILTINS)}") from None
