"""Mesoscopic traffic engine: per-edge point queues with capacity-bounded
outflow and a linear speed-density slowdown.

Each edge holds a FIFO queue of vehicles. A vehicle entering an edge gets a
scheduled exit time from the density-dependent speed at entry; it may leave
once that time has passed, the edge's outflow credit (capacity/3600 * dt per
step, fractional remainder carried, capped at one vehicle) allows it, and the
next edge of its route is open. Vehicles already on an edge when it closes
drain normally; only new entries are rejected (by routing).

Only the orchestrator mutates state; all read-only views (heatmap, travel
times, positions) may be taken between steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from collections import deque

import numpy as np

from .errors import MobisimError, UnknownElementError
from .netgraph import Edge, RoadNetwork, Route

JAM_SPACING_M = 7.5       # standard jam spacing per vehicle
MIN_SPEED_FACTOR = 0.1

AT_ACTIVITY = "at_activity"
EN_ROUTE = "en_route"
FINISHED = "finished"


class DuplicateInsertionError(MobisimError):
    pass


@dataclass
class VehicleState:
    agent_id: str
    route: Route
    route_index: int
    edge_entry_time: float
    scheduled_exit_time: float


@dataclass
class SimulationState:
    clock: float = 0.0
    queues: dict[str, deque[VehicleState]] = field(default_factory=dict)  # non-empty edges only
    outflow_credit: dict[str, float] = field(default_factory=dict)
    agent_status: dict[str, str] = field(default_factory=dict)
    inserted_total: int = 0
    arrived_total: int = 0
    arrivals_this_step: list[tuple[float, str]] = field(default_factory=list)

    def en_route_count(self) -> int:
        return sum(len(q) for q in self.queues.values())

    def edge_vehicle_count(self, edge_id: str) -> int:
        q = self.queues.get(edge_id)
        return len(q) if q else 0


def speed_factor(edge: Edge, count: int) -> float:
    jam = edge.lanes * edge.length / JAM_SPACING_M
    return max(MIN_SPEED_FACTOR, 1.0 - count / jam)


def current_travel_time(state: SimulationState, net: RoadNetwork, edge_id: str) -> float:
    edge = net.edge(edge_id)
    return edge.free_flow_time / speed_factor(edge, state.edge_vehicle_count(edge_id))


def congestion_index(state: SimulationState, net: RoadNetwork, edge_id: str) -> float:
    """current_travel_time / free_flow_time; 1.0 for an empty edge."""
    edge = net.edge(edge_id)
    return 1.0 / speed_factor(edge, state.edge_vehicle_count(edge_id))


def refresh_travel_times(state: SimulationState, net: RoadNetwork) -> dict[str, float]:
    """Per-edge current travel times, the routing weight table."""
    out = {}
    for eid, edge in net.edges.items():
        out[eid] = edge.free_flow_time / speed_factor(edge, state.edge_vehicle_count(eid))
    return out


def _enter_edge(state: SimulationState, net: RoadNetwork, veh: VehicleState, edge_id: str) -> None:
    edge = net.edges[edge_id]
    q = state.queues.get(edge_id)
    count = len(q) if q else 0  # density seen by the entering vehicle
    speed = edge.free_flow_speed * speed_factor(edge, count)
    speed = min(edge.free_flow_speed, speed)
    veh.edge_entry_time = state.clock
    veh.scheduled_exit_time = state.clock + edge.length / speed
    if q is None:
        q = deque()
        state.queues[edge_id] = q
    q.append(veh)


def insert_vehicle(state: SimulationState, net: RoadNetwork, agent_id: str,
                   route: Route) -> VehicleState:
    """Enqueue an agent's vehicle on the first edge of its route."""
    if state.agent_status.get(agent_id) == EN_ROUTE:
        raise DuplicateInsertionError(f"agent {agent_id!r} is already en route")
    first = route.edges[0]
    if net.edge(first).closed:
        raise ValueError(f"route starts on closed edge {first!r}")
    veh = VehicleState(agent_id=agent_id, route=route, route_index=0,
                       edge_entry_time=state.clock, scheduled_exit_time=state.clock)
    _enter_edge(state, net, veh, first)
    state.agent_status[agent_id] = EN_ROUTE
    state.inserted_total += 1
    return veh


def swap_route(veh: VehicleState, new_route: Route) -> None:
    """Swap the remaining route of an en-route vehicle in place.

    The new route must start at the vehicle's current edge; the vehicle keeps
    its position in the current queue.
    """
    current = veh.route.edges[veh.route_index]
    if new_route.edges[0] != current:
        raise ValueError(
            f"new route must start at current edge {current!r}, got {new_route.edges[0]!r}"
        )
    veh.route = new_route
    veh.route_index = 0


def reroute_vehicle(state: SimulationState, agent_id: str, new_route: Route) -> bool:
    """Locate an agent's vehicle and swap its route; False if not en route."""
    veh = find_vehicle(state, agent_id)
    if veh is None:
        return False
    swap_route(veh, new_route)
    return True


def uturn_vehicle(state: SimulationState, net: RoadNetwork, veh: VehicleState) -> str | None:
    """Turn a vehicle around onto the reverse edge of its current segment.

    Escape hatch for vehicles trapped by closures (every onward edge closed).
    The reverse edge is used even if itself closed: vehicles inside a closed
    segment are always allowed to drain out. Returns the reverse edge id, or
    None when the segment is one-way.
    """
    cur_id = veh.route.edges[veh.route_index]
    cur = net.edges[cur_id]
    reverse = None
    for cand in net.adjacency[cur.to_node]:
        e = net.edges[cand]
        if e.to_node == cur.from_node:
            reverse = cand
            break
    if reverse is None:
        return None
    q = state.queues.get(cur_id)
    if q is None or veh not in q:
        return None
    q.remove(veh)
    if not q:
        del state.queues[cur_id]
        state.outflow_credit.pop(cur_id, None)
    veh.route = Route(edges=(reverse,), departure_time=veh.route.departure_time,
                      estimated_arrival=veh.route.estimated_arrival)
    veh.route_index = 0
    _enter_edge(state, net, veh, reverse)
    return reverse


def step(state: SimulationState, net: RoadNetwork, dt: float) -> SimulationState:
    """Advance the world by dt seconds."""
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    state.clock += dt
    state.arrivals_this_step = []

    for edge_id in list(state.queues.keys()):
        q = state.queues.get(edge_id)
        if not q:
            continue
        edge = net.edges[edge_id]
        credit = state.outflow_credit.get(edge_id, 0.0) + edge.capacity / 3600.0 * dt
        while q:
            head = q[0]
            if head.scheduled_exit_time > state.clock or credit < 1.0:
                break
            last_edge = head.route_index + 1 >= len(head.route.edges)
            if last_edge:
                q.popleft()
                credit -= 1.0
                state.agent_status[head.agent_id] = AT_ACTIVITY
                state.arrived_total += 1
                state.arrivals_this_step.append((state.clock, head.agent_id))
                continue
            next_id = head.route.edges[head.route_index + 1]
            if net.edges[next_id].closed:
                break  # head blocked until a reroute arrives; queue waits behind it
            q.popleft()
            credit -= 1.0
            head.route_index += 1
            _enter_edge(state, net, head, next_id)
        if q:
            state.outflow_credit[edge_id] = min(credit, 1.0)  # carry at most one vehicle
        else:
            del state.queues[edge_id]
            state.outflow_credit.pop(edge_id, None)
    return state


def density_heatmap(state: SimulationState, net: RoadNetwork, cell_size: float) -> np.ndarray:
    """Vehicle counts binned by current-edge midpoint on a cell_size grid.

    Grid covers the network bounding box; grid.sum() equals the en-route count.
    """
    if cell_size <= 0:
        raise ValueError(f"cell_size must be > 0, got {cell_size}")
    min_x, min_y, max_x, max_y = net.bounding_box()
    cols = max(1, math.ceil((max_x - min_x) / cell_size))
    rows = max(1, math.ceil((max_y - min_y) / cell_size))
    grid = np.zeros((rows, cols), dtype=np.int64)
    for edge_id, q in state.queues.items():
        if not q:
            continue
        mx, my = net.edge_midpoint(edge_id)
        c = min(cols - 1, max(0, int((mx - min_x) / cell_size)))
        r = min(rows - 1, max(0, int((my - min_y) / cell_size)))
        grid[r, c] += len(q)
    return grid


def vehicle_positions(state: SimulationState, net: RoadNetwork) -> list[tuple[str, float, float, float]]:
    """(agent_id, x, y, speed) for every en-route vehicle, interpolated along
    its current edge by elapsed traversal fraction."""
    out = []
    for edge_id, q in state.queues.items():
        e = net.edges[edge_id]
        x1, y1 = net.nodes[e.from_node]
        x2, y2 = net.nodes[e.to_node]
        for veh in q:
            span = veh.scheduled_exit_time - veh.edge_entry_time
            frac = 0.0 if span <= 0 else min(1.0, max(0.0, (state.clock - veh.edge_entry_time) / span))
            speed = e.length / span if span > 0 else 0.0
            out.append((veh.agent_id,
                        x1 + frac * (x2 - x1),
                        y1 + frac * (y2 - y1),
                        speed))
    return out


def find_vehicle(state: SimulationState, agent_id: str) -> VehicleState | None:
    for q in state.queues.values():
        for veh in q:
            if veh.agent_id == agent_id:
                return veh
    return None
