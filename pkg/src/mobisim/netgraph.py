"""Road network: loading, validation, routing and closure bookkeeping.

The network is a directed graph of edges. Trips are edge-to-edge: a route is an
ordered edge sequence starting at the origin edge and ending at the destination
edge, and its cost is the sum of the per-edge travel times of *all* edges in the
sequence. Ties between equal-cost routes break toward the lexicographically
smallest edge-id sequence, which makes routing fully deterministic.

The network file is a single JSON document:

    {
      "nodes": [{"id": "n1", "x": 0.0, "y": 0.0}, ...],
      "edges": [{"id": "e1", "from": "n1", "to": "n2", "length": 100.0,
                 "free_flow_speed": 10.0, "lanes": 1, "capacity": 1800.0}, ...]
    }

Nodes may carry "lat"/"lon" instead of "x"/"y" when the document declares
"projection_origin": [lat0, lon0]; the loader then applies an equirectangular
projection so that all downstream geometry stays in planar meters.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import FileFormatError, NetworkValidationError, NoPathError, UnknownElementError

EARTH_RADIUS_M = 6_371_000.0


@dataclass
class Edge:
    edge_id: str
    from_node: str
    to_node: str
    length: float            # meters
    free_flow_speed: float   # m/s
    lanes: int = 1
    capacity: float = 1800.0  # vehicles/hour, outflow
    closed: bool = False

    @property
    def free_flow_time(self) -> float:
        return self.length / self.free_flow_speed


@dataclass
class Route:
    edges: tuple[str, ...]
    departure_time: float
    estimated_arrival: float


@dataclass
class RoadNetwork:
    nodes: dict[str, tuple[float, float]]        # node_id -> (x, y) meters
    edges: dict[str, Edge]                       # insertion order = file order
    adjacency: dict[str, list[str]] = field(default_factory=dict)  # node -> outgoing edge_ids

    def __post_init__(self):
        if not self.adjacency:
            adj: dict[str, list[str]] = {n: [] for n in self.nodes}
            for e in self.edges.values():
                adj[e.from_node].append(e.edge_id)
            # sorted outgoing lists keep relaxation order (and thus routing) stable
            self.adjacency = {n: sorted(ids) for n, ids in adj.items()}

    def edge(self, edge_id: str) -> Edge:
        try:
            return self.edges[edge_id]
        except KeyError:
            raise UnknownElementError(f"unknown edge {edge_id!r}") from None

    def edge_midpoint(self, edge_id: str) -> tuple[float, float]:
        e = self.edge(edge_id)
        x1, y1 = self.nodes[e.from_node]
        x2, y2 = self.nodes[e.to_node]
        return ((x1 + x2) / 2.0, (y1 + y2) / 2.0)

    def bounding_box(self) -> tuple[float, float, float, float]:
        xs = [p[0] for p in self.nodes.values()]
        ys = [p[1] for p in self.nodes.values()]
        return min(xs), min(ys), max(xs), max(ys)

    def free_flow_weights(self) -> dict[str, float]:
        return {eid: e.free_flow_time for eid, e in self.edges.items()}

    def closed_edges(self) -> set[str]:
        return {eid for eid, e in self.edges.items() if e.closed}


def _project_latlon(lat: float, lon: float, origin: tuple[float, float]) -> tuple[float, float]:
    lat0, lon0 = origin
    x = math.radians(lon - lon0) * EARTH_RADIUS_M * math.cos(math.radians(lat0))
    y = math.radians(lat - lat0) * EARTH_RADIUS_M
    return x, y


def load_network(path: str | Path) -> RoadNetwork:
    """Load and validate a network file.

    Raises FileFormatError on malformed input and NetworkValidationError when a
    structural invariant fails; both name the offending element.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise FileFormatError(f"cannot read network file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"network file {path} is not valid JSON: {exc}") from exc

    if not isinstance(doc, dict) or "nodes" not in doc or "edges" not in doc:
        raise FileFormatError(f"network file {path} must contain 'nodes' and 'edges' arrays")

    origin = doc.get("projection_origin")

    nodes: dict[str, tuple[float, float]] = {}
    for i, rec in enumerate(doc["nodes"]):
        try:
            nid = str(rec["id"])
            if "x" in rec and "y" in rec:
                pos = (float(rec["x"]), float(rec["y"]))
            elif origin is not None and "lat" in rec and "lon" in rec:
                pos = _project_latlon(float(rec["lat"]), float(rec["lon"]), tuple(origin))
            else:
                raise KeyError("x/y (or lat/lon with projection_origin)")
        except (KeyError, TypeError, ValueError) as exc:
            raise FileFormatError(f"node record {i}: {exc}") from exc
        if nid in nodes:
            raise NetworkValidationError(f"duplicate node id {nid!r}")
        nodes[nid] = pos

    edges: dict[str, Edge] = {}
    for i, rec in enumerate(doc["edges"]):
        try:
            edge = Edge(
                edge_id=str(rec["id"]),
                from_node=str(rec["from"]),
                to_node=str(rec["to"]),
                length=float(rec["length"]),
                free_flow_speed=float(rec["free_flow_speed"]),
                lanes=int(rec.get("lanes", 1)),
                capacity=float(rec.get("capacity", 1800.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FileFormatError(f"edge record {i}: {exc}") from exc
        if edge.edge_id in edges:
            raise NetworkValidationError(f"duplicate edge id {edge.edge_id!r}")
        edges[edge.edge_id] = edge

    net = RoadNetwork(nodes=nodes, edges=edges)
    validate_network(net)
    return net


def validate_network(net: RoadNetwork) -> None:
    if not net.nodes:
        raise NetworkValidationError("network has no nodes")
    if not net.edges:
        raise NetworkValidationError("network has no edges")
    for e in net.edges.values():
        if e.from_node not in net.nodes:
            raise NetworkValidationError(f"edge {e.edge_id!r} references missing node {e.from_node!r}")
        if e.to_node not in net.nodes:
            raise NetworkValidationError(f"edge {e.edge_id!r} references missing node {e.to_node!r}")
        if e.length <= 0:
            raise NetworkValidationError(f"edge {e.edge_id!r} has non-positive length {e.length}")
        if e.free_flow_speed <= 0:
            raise NetworkValidationError(f"edge {e.edge_id!r} has non-positive free_flow_speed {e.free_flow_speed}")
        if e.lanes < 1:
            raise NetworkValidationError(f"edge {e.edge_id!r} has lanes < 1")
        if e.capacity <= 0:
            raise NetworkValidationError(f"edge {e.edge_id!r} has non-positive capacity {e.capacity}")

    # weak connectivity over the undirected view
    neighbors: dict[str, set[str]] = {n: set() for n in net.nodes}
    for e in net.edges.values():
        neighbors[e.from_node].add(e.to_node)
        neighbors[e.to_node].add(e.from_node)
    start = next(iter(net.nodes))
    seen = {start}
    stack = [start]
    while stack:
        for nb in neighbors[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    if len(seen) < len(net.nodes):
        missing = sorted(set(net.nodes) - seen)[0]
        raise NetworkValidationError(
            f"network is not weakly connected: node {missing!r} unreachable from {start!r}"
        )


def shortest_route(
    net: RoadNetwork,
    origin_edge: str,
    dest_edge: str,
    departure: float,
    weights: dict[str, float],
    allow_closed_origin: bool = False,
) -> Route:
    """Minimum-travel-time edge sequence from origin_edge to dest_edge.

    Cost of a route is the sum of `weights` over every edge in the sequence,
    the origin and destination edges included. Closed edges never appear,
    except that a vehicle already sitting on a closed edge may route out of it
    (allow_closed_origin). Equal-cost ties resolve to the lexicographically
    smallest edge-id sequence.
    """
    o = net.edge(origin_edge)
    d = net.edge(dest_edge)
    if o.closed and not allow_closed_origin:
        raise UnknownElementError(f"origin edge {origin_edge!r} is closed")
    if d.closed:
        raise UnknownElementError(f"destination edge {dest_edge!r} is closed")

    def weight(edge_id: str) -> float:
        w = weights.get(edge_id)
        if w is None or w <= 0:
            raise ValueError(f"missing or non-positive weight for open edge {edge_id!r}")
        return w

    if origin_edge == dest_edge:
        w = weight(origin_edge)
        return Route(edges=(origin_edge,), departure_time=departure, estimated_arrival=departure + w)

    # Dijkstra over edges keyed by (cost, edge-id sequence): the heap order itself
    # realizes the lexicographic tie-break, at the price of carrying paths.
    start_cost = weight(origin_edge)
    heap: list[tuple[float, tuple[str, ...]]] = [(start_cost, (origin_edge,))]
    settled: set[str] = set()
    while heap:
        cost, path = heapq.heappop(heap)
        last = path[-1]
        if last in settled:
            continue
        settled.add(last)
        if last == dest_edge:
            return Route(edges=path, departure_time=departure, estimated_arrival=departure + cost)
        for nxt_id in net.adjacency[net.edges[last].to_node]:
            if nxt_id in settled or net.edges[nxt_id].closed:
                continue
            heapq.heappush(heap, (cost + weight(nxt_id), path + (nxt_id,)))

    raise NoPathError(origin_edge, dest_edge)


def apply_closure(net: RoadNetwork, spec) -> set[str]:
    """Mark edges closed per a closure spec (explicit ids and/or circular region).

    Region membership tests the edge midpoint. Idempotent; returns the full
    affected set (already-closed edges included).
    """
    explicit = list(getattr(spec, "edges", None) or [])
    region = getattr(spec, "region", None)

    affected: set[str] = set()
    for eid in explicit:
        net.edge(eid)  # raises UnknownElementError
        affected.add(eid)

    if region is not None:
        (cx, cy), radius = region
        if radius <= 0:
            raise ValueError(f"closure region radius must be > 0, got {radius}")
        for eid in net.edges:
            mx, my = net.edge_midpoint(eid)
            if (mx - cx) ** 2 + (my - cy) ** 2 <= radius * radius:
                affected.add(eid)

    for eid in affected:
        net.edges[eid].closed = True
    return affected


def reopen_edges(net: RoadNetwork, edge_ids) -> None:
    for eid in edge_ids:
        net.edge(eid).closed = False


class TravelTimeOracle:
    """Memoized single-source travel-time lookups over a fixed weight table.

    Used for free-flow feasibility gaps (weights = free-flow times) and for
    validation under current congestion. Costs ignore the lexicographic
    tie-break since only the minimum matters. Closed edges are skipped unless
    the oracle was built with include_closed=True (free-flow feasibility is a
    static bound, so it ignores closure state).
    """

    def __init__(self, net: RoadNetwork, weights: dict[str, float], include_closed: bool = False):
        self.net = net
        self.weights = weights
        self.include_closed = include_closed
        self._cache: dict[str, dict[str, float]] = {}

    def from_edge(self, origin_edge: str) -> dict[str, float]:
        cached = self._cache.get(origin_edge)
        if cached is not None:
            return cached
        net = self.net
        w = self.weights
        dist: dict[str, float] = {origin_edge: w[origin_edge]}
        heap = [(w[origin_edge], origin_edge)]
        while heap:
            cost, eid = heapq.heappop(heap)
            if cost > dist.get(eid, math.inf):
                continue
            for nxt in net.adjacency[net.edges[eid].to_node]:
                if not self.include_closed and net.edges[nxt].closed:
                    continue
                ncost = cost + w[nxt]
                if ncost < dist.get(nxt, math.inf):
                    dist[nxt] = ncost
                    heapq.heappush(heap, (ncost, nxt))
        self._cache[origin_edge] = dist
        return dist

    def between(self, origin_edge: str, dest_edge: str) -> float:
        """Travel time origin->dest (sum over all route edges); inf if unreachable."""
        return self.from_edge(origin_edge).get(dest_edge, math.inf)


def free_flow_oracle(net: RoadNetwork) -> TravelTimeOracle:
    return TravelTimeOracle(net, net.free_flow_weights(), include_closed=True)
