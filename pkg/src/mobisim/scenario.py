"""Scenario interventions: road closures and special events.

Identifies agents affected by a closure, scores event interest per agent
(product of base, age, sex, income and distance factors), selects attendees
up to capacity, and turns all of it into modification requests at the
environment-update cadence. Trigger bookkeeping (once per agent per closure,
once per agent per trip for congestion, one announcement per event) lives in
a TriggerTracker owned by the caller.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .adaptor import ModificationRequest, TRIGGER_CLOSURE, TRIGGER_CONGESTION, TRIGGER_EVENT
from .errors import FileFormatError, UnknownElementError
from .netgraph import RoadNetwork
from .worldmodel import ActivityCode, DemographicProfile, World


@dataclass
class ClosureSpec:
    closure_id: str
    edges: list[str] = field(default_factory=list)
    region: tuple[tuple[float, float], float] | None = None  # ((x, y), radius_m)
    start: float = 0.0
    end: float | None = None  # None = stays closed

    def __post_init__(self):
        if not self.edges and self.region is None:
            raise ValueError(f"closure {self.closure_id}: needs edges and/or a region")
        if self.region is not None and self.region[1] <= 0:
            raise ValueError(f"closure {self.closure_id}: region radius must be > 0")
        if self.end is not None and not (self.start < self.end):
            raise ValueError(f"closure {self.closure_id}: start must precede end")

    def active_at(self, clock: float) -> bool:
        return self.start <= clock and (self.end is None or clock < self.end)


@dataclass
class EventSpec:
    event_id: str
    venue: str                        # poi_id
    start: float
    duration: float
    capacity: int
    base_interest: float = 1.0
    age_factors: list[tuple[int, int, float]] = field(default_factory=list)  # (min, max, f)
    gender_factors: dict[str, float] = field(default_factory=dict)
    income_factors: dict[int, float] = field(default_factory=dict)
    distance_scale_m: float = 3000.0
    announce: float = 0.0
    activity_code: int = int(ActivityCode.RECREATIONAL)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError(f"event {self.event_id}: capacity must be >= 1")
        if self.duration <= 0:
            raise ValueError(f"event {self.event_id}: duration must be > 0")
        factors = ([f for _, _, f in self.age_factors] + list(self.gender_factors.values())
                   + list(self.income_factors.values()) + [self.base_interest])
        if any(f <= 0 for f in factors):
            raise ValueError(f"event {self.event_id}: all factors must be > 0")


@dataclass
class InterestScore:
    agent_id: str
    score: float
    components: tuple[float, float, float, float, float]  # base, age, sex, income, distance


@dataclass
class Scenario:
    closures: list[ClosureSpec] = field(default_factory=list)
    events: list[EventSpec] = field(default_factory=list)


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise FileFormatError(f"cannot read scenario file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"scenario file {path} is not valid JSON: {exc}") from exc

    closures = []
    for i, rec in enumerate(doc.get("closures", [])):
        try:
            region = None
            if rec.get("region") is not None:
                region = (tuple(rec["region"]["center"]), float(rec["region"]["radius"]))
            closures.append(ClosureSpec(
                closure_id=str(rec["closure_id"]),
                edges=[str(e) for e in rec.get("edges", [])],
                region=region,
                start=float(rec.get("start", 0.0)),
                end=None if rec.get("end") is None else float(rec["end"]),
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise FileFormatError(f"closure record {i}: {exc}") from exc

    events = []
    for i, rec in enumerate(doc.get("events", [])):
        try:
            events.append(EventSpec(
                event_id=str(rec["event_id"]),
                venue=str(rec["venue"]),
                start=float(rec["start"]),
                duration=float(rec["duration"]),
                capacity=int(rec["capacity"]),
                base_interest=float(rec.get("base_interest", 1.0)),
                age_factors=[(int(b["min"]), int(b["max"]), float(b["factor"]))
                             for b in rec.get("age_factors", [])],
                gender_factors={str(k): float(v)
                                for k, v in rec.get("gender_factors", {}).items()},
                income_factors={int(k): float(v)
                                for k, v in rec.get("income_factors", {}).items()},
                distance_scale_m=float(rec.get("distance_scale_m", 3000.0)),
                announce=float(rec.get("announce", 0.0)),
                activity_code=int(rec.get("activity_code", ActivityCode.RECREATIONAL)),
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise FileFormatError(f"event record {i}: {exc}") from exc
    return Scenario(closures=closures, events=events)


def validate_scenario(scenario: Scenario, net: RoadNetwork, world: World) -> None:
    """Startup validation: every referenced edge and POI must exist."""
    for c in scenario.closures:
        for eid in c.edges:
            net.edge(eid)
    for e in scenario.events:
        world.poi(e.venue)


# ----------------------------------------------------------- closures


def closure_affected_edges(net: RoadNetwork, closure: ClosureSpec) -> set[str]:
    """Edges a closure touches (explicit ids plus midpoints inside the region);
    pure counterpart of netgraph.apply_closure."""
    out = set()
    for eid in closure.edges:
        net.edge(eid)
        out.add(eid)
    if closure.region is not None:
        (cx, cy), r = closure.region
        for eid in net.edges:
            mx, my = net.edge_midpoint(eid)
            if (mx - cx) ** 2 + (my - cy) ** 2 <= r * r:
                out.add(eid)
    return out


def _poi_hit(world: World, poi_id: str, affected: set[str], closure: ClosureSpec) -> bool:
    poi = world.pois.get(poi_id)
    if poi is None:
        return False
    if poi.attached_edge in affected:
        return True
    if closure.region is not None:
        (cx, cy), r = closure.region
        px, py = poi.position
        return (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    return False


def affected_by_closure(closure: ClosureSpec, agents_db, net: RoadNetwork,
                        world: World, clock: float = 0.0) -> set[str]:
    """Agents with a future activity at a closed/inside-region POI, or whose
    current route contains an affected edge."""
    affected_edges = closure_affected_edges(net, closure)
    hit: set[str] = set()
    for record in agents_db.records():
        for act in record.chain.future_activities(clock):
            if _poi_hit(world, act.poi, affected_edges, closure):
                hit.add(record.agent_id)
                break
        else:
            route = record.current_route
            if route is not None and any(e in affected_edges for e in route.edges):
                hit.add(record.agent_id)
    return hit


# ----------------------------------------------------------- interest scores


def _age_factor(event: EventSpec, age: int) -> float:
    for lo, hi, f in event.age_factors:
        if lo <= age <= hi:
            return f
    raise UnknownElementError(
        f"event {event.event_id}: no age factor covers age {age}"
    )


def interest_score(profile: DemographicProfile, event: EventSpec,
                   home_position: tuple[float, float],
                   venue_position: tuple[float, float]) -> InterestScore:
    """score = base * age * sex * income * exp(-distance/scale)."""
    base = event.base_interest
    age_f = _age_factor(event, profile.age) if event.age_factors else 1.0
    try:
        sex_f = event.gender_factors[profile.gender] if event.gender_factors else 1.0
    except KeyError:
        raise UnknownElementError(
            f"event {event.event_id}: no gender factor for {profile.gender!r}") from None
    try:
        income_f = event.income_factors[profile.income_bracket] if event.income_factors else 1.0
    except KeyError:
        raise UnknownElementError(
            f"event {event.event_id}: no income factor for bracket {profile.income_bracket}") from None
    dist = math.dist(home_position, venue_position)
    distance_f = math.exp(-dist / event.distance_scale_m)
    score = base * age_f * sex_f * income_f * distance_f
    return InterestScore(agent_id=profile.agent_id, score=score,
                         components=(base, age_f, sex_f, income_f, distance_f))


def select_attendees(profiles, event: EventSpec, world: World) -> list[str]:
    """The min(capacity, population) highest interest scores; ties break to the
    smaller agent_id; result ordered by descending score."""
    venue_pos = world.poi(event.venue).position
    scored = []
    for p in profiles:
        home_pos = world.poi(p.home_poi).position if p.home_poi else venue_pos
        scored.append(interest_score(p, event, home_pos, venue_pos))
    scored.sort(key=lambda s: (-s.score, s.agent_id))
    return [s.agent_id for s in scored[: event.capacity]]


# ----------------------------------------------------------- triggers


@dataclass
class TriggerTracker:
    closure_notified: dict[str, set[str]] = field(default_factory=dict)  # closure_id -> agents
    congestion_notified: set[tuple[str, float]] = field(default_factory=set)  # (agent, departure)
    events_announced: set[str] = field(default_factory=set)


def _closure_candidates(world: World, chain, affected: set[str], closure: ClosureSpec,
                        limit: int = 12):
    """Open POIs serving the codes of the affected activities, nearest first."""
    codes = set()
    anchors = []
    for act in chain.activities:
        if _poi_hit(world, act.poi, affected, closure):
            codes.add(act.activity_type)
            anchors.append(world.pois[act.poi].position)
    if not codes:
        return []
    ax = sum(p[0] for p in anchors) / len(anchors)
    ay = sum(p[1] for p in anchors) / len(anchors)
    cands = []
    for code in sorted(codes):
        for poi in world.serving_pois(code):
            if poi.attached_edge in affected or _poi_hit(world, poi.poi_id, affected, closure):
                continue
            cands.append((math.dist(poi.position, (ax, ay)), poi.poi_id, poi))
    cands.sort(key=lambda t: (t[0], t[1]))
    seen = set()
    out = []
    for _, pid, poi in cands:
        if pid not in seen:
            seen.add(pid)
            out.append(poi)
        if len(out) >= limit:
            break
    return out


def raise_triggers(
    state,
    net: RoadNetwork,
    closures: list[ClosureSpec],
    events: list[EventSpec],
    congestion_threshold: float,
    *,
    world: World,
    agents_db,
    tracker: TriggerTracker,
    weights: dict[str, float] | None = None,
) -> list[ModificationRequest]:
    """Modification requests due at this environment update.

    Emits each closure request once per agent per closure, congestion requests
    once per agent per trip, and event requests for selected attendees at
    announcement time. Re-raising with an unchanged world yields nothing new.
    """
    clock = state.clock
    requests: list[ModificationRequest] = []

    for closure in closures:
        if not closure.active_at(clock):
            continue
        notified = tracker.closure_notified.setdefault(closure.closure_id, set())
        affected_edges = closure_affected_edges(net, closure)
        hit = affected_by_closure(closure, agents_db, net, world, clock=clock)
        for agent_id in sorted(hit - notified):
            record = agents_db.get(agent_id)
            requests.append(ModificationRequest(
                agent_id=agent_id,
                trigger=TRIGGER_CLOSURE,
                context={
                    "closure_id": closure.closure_id,
                    "closed_edges": sorted(affected_edges),
                },
                current_chain=record.chain,
                current_clock=clock,
                candidate_pois=_closure_candidates(world, record.chain, affected_edges, closure),
                profile=record.profile,
            ))
            notified.add(agent_id)

    if weights is not None:
        for record in sorted(agents_db.records(), key=lambda r: r.agent_id):
            route = record.current_route
            if route is None or not record.en_route:
                continue
            key = (record.agent_id, route.departure_time)
            if key in tracker.congestion_notified:
                continue
            veh = getattr(record, "vehicle", None)
            pending = route.edges[veh.route_index:] if veh is not None else route.edges
            if not pending:
                continue
            fft = sum(net.edges[e].free_flow_time for e in pending)
            cur = sum(weights.get(e, net.edges[e].free_flow_time) for e in pending)
            if fft > 0 and cur / fft >= congestion_threshold:
                requests.append(ModificationRequest(
                    agent_id=record.agent_id,
                    trigger=TRIGGER_CONGESTION,
                    context={"congestion_index": cur / fft, "threshold": congestion_threshold},
                    current_chain=record.chain,
                    current_clock=clock,
                    profile=record.profile,
                ))
                tracker.congestion_notified.add(key)

    for event in events:
        if event.event_id in tracker.events_announced or clock < event.announce:
            continue
        tracker.events_announced.add(event.event_id)
        profiles = [agents_db.get(a).profile for a in sorted(agents_db.agent_ids())]
        for agent_id in select_attendees(profiles, event, world):
            record = agents_db.get(agent_id)
            requests.append(ModificationRequest(
                agent_id=agent_id,
                trigger=TRIGGER_EVENT,
                context={
                    "event_id": event.event_id,
                    "venue": event.venue,
                    "start": event.start,
                    "duration": event.duration,
                    "activity_code": event.activity_code,
                },
                current_chain=record.chain,
                current_clock=clock,
                profile=record.profile,
            ))
    return requests
