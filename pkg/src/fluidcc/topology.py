"""Network graphs with every element on an edge.

Users, buffers and cross-traffic sources each own an input node (``-``) and
an output node (``+``).  Transmission channels connect an output node to the
input node of a different element and carry a constant propagation delay.
The communication path of a user, from its output node back to its input
node, is its *circuit*; routing of every class of flow follows its circuit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import TopologyError

__all__ = [
    "NodeId",
    "Edge",
    "User",
    "Buffer",
    "Channel",
    "CrossTraffic",
    "Circuit",
    "RoutingTable",
    "NetworkGraph",
    "build_graph",
    "circuit_of",
]

INPUT, OUTPUT = "-", "+"


@dataclass(frozen=True, order=True)
class NodeId:
    element: str
    side: str  # "-" (input) or "+" (output)
    kind: str  # "user" | "buffer" | "crosstraffic"

    def __str__(self):
        return f"{self.element}{self.side}"


@dataclass(frozen=True)
class Edge:
    begin: NodeId
    end: NodeId
    kind: str  # "user" | "buffer" | "channel"
    prop_delay: float = 0.0


@dataclass(frozen=True)
class User:
    id: str
    # Buffers the circuit must traverse, in order; only needed to pick one
    # circuit when the channels allow several.
    path: tuple[str, ...] | None = None


@dataclass(frozen=True)
class Buffer:
    id: str
    capacity: float  # packets/second
    tau0: float | None = None  # initial queuing delay; None -> equilibrium


@dataclass(frozen=True)
class Channel:
    src: str  # element whose output node feeds the channel
    dst: str  # element whose input node receives it
    delay: float = 0.0


@dataclass(frozen=True)
class CrossTraffic:
    """Unregulated flow injected at a buffer input and dropped at its output.

    ``role="cross"`` is bandwidth-limiting cross-traffic (one per buffer);
    ``role="source"`` is a generic exogenous input class, several of which
    may share a buffer (used to drive a buffer with scripted flows).
    """

    id: str
    buffer: str
    role: str = "cross"


@dataclass(frozen=True)
class Circuit:
    user: str
    path: tuple[Edge, ...]
    buffers: tuple[str, ...]
    hop_delays: tuple[float, ...]  # len(buffers) + 1 channel delays, in path order

    @property
    def fwd_delays(self) -> tuple[float, ...]:
        """Channel delays in front of each buffer."""
        return self.hop_delays[:-1]

    @property
    def bwd_delays(self) -> tuple[float, ...]:
        """Channel delay from the last buffer (or the user) back to the user."""
        return self.hop_delays[-1:]

    @property
    def total_delay(self) -> float:
        return sum(self.hop_delays)

    @property
    def forward_delay(self) -> float:
        """Propagation from the user output to the last buffer input."""
        return sum(self.hop_delays[:-1])

    @property
    def backward_delay(self) -> float:
        return self.hop_delays[-1]

    def delay_to(self, buffer_id: str) -> float:
        """Propagation delay from the user output to the input of ``buffer_id``."""
        j = self.buffers.index(buffer_id)
        return sum(self.hop_delays[: j + 1])


@dataclass(frozen=True)
class RoutingTable:
    # element output node -> ((destination input node, channel delay), ...)
    routes: Mapping[NodeId, tuple[tuple[NodeId, float], ...]]
    # (element id, class id) -> (destination node, delay) for the flow of that
    # class leaving the element's output node
    next_hop: Mapping[tuple[str, str], tuple[NodeId, float]]
    # buffer input node -> cross-traffic ids injected there
    cross_traffic_injections: Mapping[NodeId, tuple[str, ...]]

    def inputs_of(self, node: NodeId) -> list[tuple[str, str, float]]:
        """Flows routed into ``node`` as ``(source element, class, delay)``."""
        found = []
        for (elem, cls), (dst, delay) in self.next_hop.items():
            if dst == node:
                found.append((elem, cls, delay))
        return found


@dataclass(frozen=True)
class NetworkGraph:
    users: Mapping[str, User]
    buffers: Mapping[str, Buffer]
    cross_traffic: Mapping[str, CrossTraffic]
    edges: tuple[Edge, ...]
    circuits: Mapping[str, Circuit]
    routing: RoutingTable
    channels: tuple[Channel, ...] = field(default=())

    def kind_of(self, element: str) -> str:
        if element in self.users:
            return "user"
        if element in self.buffers:
            return "buffer"
        if element in self.cross_traffic:
            return "crosstraffic"
        raise TopologyError(f"unknown element {element!r}")

    def node(self, element: str, side: str) -> NodeId:
        return NodeId(element, side, self.kind_of(element))

    def buffer_classes(self, buffer_id: str) -> list[str]:
        """Classes entering ``buffer_id``: users first (declaration order), then cross-traffic."""
        classes = [u for u, c in self.circuits.items() if buffer_id in c.buffers]
        classes += [x for x, ct in self.cross_traffic.items() if ct.buffer == buffer_id]
        return classes

    def class_sources(self, buffer_id: str) -> dict[str, tuple[str, float]]:
        """For each class at ``buffer_id``'s input: (upstream element, channel delay).

        Cross-traffic classes have the cross-traffic element itself as source
        and zero delay.
        """
        out: dict[str, tuple[str, float]] = {}
        for user, circ in self.circuits.items():
            if buffer_id not in circ.buffers:
                continue
            j = circ.buffers.index(buffer_id)
            upstream = user if j == 0 else circ.buffers[j - 1]
            out[user] = (upstream, circ.hop_delays[j])
        for x, ct in self.cross_traffic.items():
            if ct.buffer == buffer_id:
                out[x] = (x, 0.0)
        return out

    def buffer_order(self, min_delay: float = 0.0) -> list[str]:
        """Buffers sorted so that any upstream buffer reached through a channel
        shorter than or equal to ``min_delay`` comes first."""
        deps: dict[str, set[str]] = {b: set() for b in self.buffers}
        for b in self.buffers:
            for _cls, (src, delay) in self.class_sources(b).items():
                if src in self.buffers and delay <= min_delay:
                    deps[b].add(src)
        order: list[str] = []
        pending = list(self.buffers)
        while pending:
            ready = [b for b in pending if not (deps[b] - set(order))]
            if not ready:
                raise TopologyError(f"zero-delay cycle among buffers {pending}")
            for b in ready:
                order.append(b)
                pending.remove(b)
        return order

    def is_homogeneous(self, tol: float = 1e-12) -> bool:
        """True when every circuit has the same per-hop delays and buffers."""
        circs = list(self.circuits.values())
        if not circs:
            return True
        ref = circs[0]
        for c in circs[1:]:
            if c.buffers != ref.buffers or len(c.hop_delays) != len(ref.hop_delays):
                return False
            if any(abs(a - b) > tol for a, b in zip(c.hop_delays, ref.hop_delays)):
                return False
        return True


def _check_unique(ids: Iterable[str]) -> None:
    seen: set[str] = set()
    for i in ids:
        if not isinstance(i, str) or not i:
            raise TopologyError(f"element identifiers must be non-empty strings, got {i!r}")
        if i in seen:
            raise TopologyError(f"duplicate identifier {i!r}")
        seen.add(i)


def build_graph(users: Sequence[User], buffers: Sequence[Buffer], channels: Sequence[Channel],
                cross_traffic: Sequence[CrossTraffic] = ()) -> NetworkGraph:
    """Validate the element lists and derive circuits and routing."""
    users = [u if isinstance(u, User) else User(u) for u in users]
    _check_unique([u.id for u in users] + [b.id for b in buffers] + [x.id for x in cross_traffic])
    user_map = {u.id: u for u in users}
    buf_map = {b.id: b for b in buffers}
    cross_map = {x.id: x for x in cross_traffic}

    for b in buffers:
        if not b.capacity > 0:
            raise TopologyError(f"buffer {b.id!r}: capacity must be > 0")
        if b.tau0 is not None and b.tau0 < 0:
            raise TopologyError(f"buffer {b.id!r}: tau0 must be >= 0")

    def kind(elem: str) -> str:
        if elem in user_map:
            return "user"
        if elem in buf_map:
            return "buffer"
        if elem in cross_map:
            return "crosstraffic"
        raise TopologyError(f"channel endpoint {elem!r} is not a declared element")

    edges: list[Edge] = []
    for u in users:
        edges.append(Edge(NodeId(u.id, INPUT, "user"), NodeId(u.id, OUTPUT, "user"), "user"))
    for b in buffers:
        edges.append(Edge(NodeId(b.id, INPUT, "buffer"), NodeId(b.id, OUTPUT, "buffer"), "buffer"))
    for x in cross_traffic:
        if x.buffer not in buf_map:
            raise TopologyError(f"cross-traffic {x.id!r} attached to unknown buffer {x.buffer!r}")
        if x.role not in ("cross", "source"):
            raise TopologyError(f"cross-traffic {x.id!r}: unknown role {x.role!r}")
        edges.append(Edge(NodeId(x.id, INPUT, "crosstraffic"), NodeId(x.id, OUTPUT, "crosstraffic"), "crosstraffic"))

    out_channels: dict[str, list[Channel]] = {}
    seen_pairs: set[tuple[str, str]] = set()
    for ch in channels:
        ks, kd = kind(ch.src), kind(ch.dst)
        if ch.delay < 0:
            raise TopologyError(f"channel {ch.src}->{ch.dst}: negative delay {ch.delay!r}")
        if "crosstraffic" in (ks, kd):
            raise TopologyError(f"channel {ch.src}->{ch.dst}: cross-traffic attaches to buffers directly")
        if ch.src == ch.dst and ks != "user":
            raise TopologyError(f"channel {ch.src}->{ch.dst}: endpoints must be distinct elements")
        if ks == "user" and kd == "user" and ch.src != ch.dst:
            raise TopologyError(f"channel {ch.src}->{ch.dst}: users cannot forward other users' flows")
        if (ch.src, ch.dst) in seen_pairs:
            raise TopologyError(f"duplicate channel {ch.src}->{ch.dst}")
        seen_pairs.add((ch.src, ch.dst))
        out_channels.setdefault(ch.src, []).append(ch)
        edges.append(Edge(NodeId(ch.src, OUTPUT, ks), NodeId(ch.dst, INPUT, kd), "channel", float(ch.delay)))

    circuits = {u.id: _find_circuit(u, out_channels, buf_map) for u in users}

    # routing
    routes: dict[NodeId, list[tuple[NodeId, float]]] = {}
    next_hop: dict[tuple[str, str], tuple[NodeId, float]] = {}
    for uid, circ in circuits.items():
        hops = [uid, *circ.buffers]
        targets = [*circ.buffers, uid]
        for src, dst, d in zip(hops, targets, circ.hop_delays):
            src_node = NodeId(src, OUTPUT, kind(src))
            dst_node = NodeId(dst, INPUT, kind(dst))
            next_hop[(src, uid)] = (dst_node, d)
            lst = routes.setdefault(src_node, [])
            if (dst_node, d) not in lst:
                lst.append((dst_node, d))
    injections: dict[NodeId, list[str]] = {}
    for x in cross_traffic:
        b_in = NodeId(x.buffer, INPUT, "buffer")
        if x.role == "cross" and any(cross_map[o].role == "cross" for o in injections.get(b_in, [])):
            raise TopologyError(f"buffer {x.buffer!r} already has a cross-traffic source")
        injections.setdefault(b_in, []).append(x.id)
        sink = NodeId(x.id, OUTPUT, "crosstraffic")
        next_hop[(x.buffer, x.id)] = (sink, 0.0)
        routes.setdefault(NodeId(x.buffer, OUTPUT, "buffer"), []).append((sink, 0.0))

    routing = RoutingTable(
        routes={k: tuple(v) for k, v in routes.items()},
        next_hop=next_hop,
        cross_traffic_injections={k: tuple(v) for k, v in injections.items()},
    )
    return NetworkGraph(user_map, buf_map, cross_map, tuple(edges), circuits, routing, tuple(channels))


def _find_circuit(user: User, out_channels: Mapping[str, list[Channel]], buffers: Mapping[str, Buffer]) -> Circuit:
    paths: list[list[Channel]] = []

    def walk(elem: str, visited: tuple[str, ...], trail: list[Channel]) -> None:
        for ch in out_channels.get(elem, ()):
            if ch.dst == user.id:
                paths.append(trail + [ch])
            elif ch.dst in buffers and ch.dst not in visited:
                walk(ch.dst, visited + (ch.dst,), trail + [ch])

    walk(user.id, (), [])
    if user.path is not None:
        wanted = tuple(user.path)
        paths = [p for p in paths if tuple(ch.dst for ch in p[:-1]) == wanted]
        if not paths:
            raise TopologyError(f"user {user.id!r}: declared path {list(wanted)} is not connected by channels")
    if not paths:
        raise TopologyError(f"user {user.id!r}: no circuit from its output back to its input")
    if len(paths) > 1:
        options = [[ch.dst for ch in p[:-1]] for p in paths]
        raise TopologyError(f"user {user.id!r}: multiple paths {options}; declare one with 'path'")
    chans = paths[0]
    ids = [user.id, *[ch.dst for ch in chans]]
    buf_ids = tuple(ids[1:-1])
    path: list[Edge] = []
    for k, ch in enumerate(chans):
        src_kind = "user" if k == 0 else "buffer"
        dst_kind = "user" if k == len(chans) - 1 else "buffer"
        path.append(Edge(NodeId(ch.src, OUTPUT, src_kind), NodeId(ch.dst, INPUT, dst_kind), "channel", float(ch.delay)))
        if dst_kind == "buffer":
            path.append(Edge(NodeId(ch.dst, INPUT, "buffer"), NodeId(ch.dst, OUTPUT, "buffer"), "buffer"))
    return Circuit(user.id, tuple(path), buf_ids, tuple(float(ch.delay) for ch in chans))


def circuit_of(graph: NetworkGraph, user: str) -> Circuit:
    try:
        return graph.circuits[user]
    except KeyError:
        raise TopologyError(f"unknown user {user!r}") from None
