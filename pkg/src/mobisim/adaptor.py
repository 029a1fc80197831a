"""Activity chain modification: prompt templating, pluggable decision
backends (deterministic rules or an external chat-completion service),
response validation, and bounded-concurrency batch processing.

Every proposed modification is a full replacement of the agent's activity
list. The validation gate enforces chain invariants, past immutability,
closure avoidance and travel feasibility; a rejected proposal earns one
retry with the rejection reason appended to the prompt, then the request
falls back to the rule backend.
"""

from __future__ import annotations

import json
import math
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import requests as _requests

from .chainsynth import Activity, ActivityChain, chain_violations
from .errors import MobisimError, ResponseParseError, ResponseSchemaError
from .netgraph import RoadNetwork, TravelTimeOracle
from .worldmodel import (
    INFLEXIBLE_CODES,
    ActivityCode,
    DemographicProfile,
    Poi,
    World,
    activity_label,
)

MIN_TRUNCATED_DURATION_S = 600  # congestion rule never shrinks below 10 minutes
MIN_KEPT_ACTIVITY_S = 300

TRIGGER_CLOSURE = "closure"
TRIGGER_CONGESTION = "congestion"
TRIGGER_EVENT = "event"


class BackendUnreachableError(MobisimError):
    """Decision backend cannot be reached; requests fall back to rules."""


@dataclass
class ModificationRequest:
    agent_id: str
    trigger: str                      # closure | congestion | event
    context: dict                     # trigger payload, see scenario module
    current_chain: ActivityChain
    current_clock: float
    candidate_pois: list[Poi] = field(default_factory=list)
    profile: DemographicProfile | None = None


@dataclass
class ChainModification:
    agent_id: str
    base_revision: int
    new_activities: list[Activity]
    rationale: str = ""


@dataclass
class PromptTemplate:
    scenario: str
    template_text: str


_RESPONSE_FORMAT = """Respond with ONE fenced JSON block (and nothing else inside the fences), \
using exactly this structure, with your modified activity list:

```json
{state_json}
```

Rules: keep already-completed activities unchanged; keep activities in \
chronological order; the first activity is Home starting at 0; the last \
activity is Home ending at {horizon}; use only POI ids from the schedule or \
the alternatives list."""

_BASE_TEMPLATE = """You are deciding how a city resident adapts today's schedule.

Resident profile:
{demographics}

Planned schedule (index. activity, start-end seconds, place):
{chain}

Current time: {clock} s since midnight.

Situation:
{situation}

Nearby alternatives (id, activities served):
{candidates}

""" + _RESPONSE_FORMAT

DEFAULT_TEMPLATES = {
    TRIGGER_CLOSURE: PromptTemplate(TRIGGER_CLOSURE, _BASE_TEMPLATE),
    TRIGGER_CONGESTION: PromptTemplate(TRIGGER_CONGESTION, _BASE_TEMPLATE),
    TRIGGER_EVENT: PromptTemplate(TRIGGER_EVENT, _BASE_TEMPLATE),
}


def _describe_profile(profile: DemographicProfile | None) -> str:
    if profile is None:
        raise ValueError("request carries no demographic profile")
    return (f"age {profile.age}, {profile.gender}, {profile.employment_status}, "
            f"income bracket {profile.income_bracket}/5, household of {profile.household_size}, "
            f"{'has' if profile.vehicle_access else 'no'} car access")


def _describe_chain(chain: ActivityChain) -> str:
    lines = []
    for i, a in enumerate(chain.activities):
        lines.append(f"{i}. {activity_label(a.activity_type)}, {int(a.start)}-{int(a.end)}, {a.poi}")
    return "\n".join(lines)


def _describe_situation(request: ModificationRequest) -> str:
    ctx = request.context
    if request.trigger == TRIGGER_CLOSURE:
        edges = ", ".join(sorted(ctx.get("closed_edges", []))) or "none listed"
        return (f"Roads have been closed (closure {ctx.get('closure_id', '?')}). "
                f"Closed road segments: {edges}. Any scheduled destination on a closed "
                f"segment or inside the closure area is unreachable; move those "
                f"activities to open alternatives, keeping their time slots.")
    if request.trigger == TRIGGER_CONGESTION:
        idx = ctx.get("congestion_index", 0.0)
        return (f"Traffic on the route to your next destination is {idx:.1f}x the normal "
                f"travel time. Consider shortening upcoming discretionary activities.")
    if request.trigger == TRIGGER_EVENT:
        return (f"You have a ticket to event {ctx.get('event_id', '?')} at POI "
                f"{ctx.get('venue', '?')} starting at {int(ctx.get('start', 0))} s for "
                f"{int(ctx.get('duration', 0))} s. Fit it into your day; keep mandatory "
                f"work or school commitments and end the day at home.")
    raise ValueError(f"unknown trigger {request.trigger!r}")


def _describe_candidates(request: ModificationRequest) -> str:
    if not request.candidate_pois:
        return "none"
    lines = []
    for p in request.candidate_pois:
        cats = ",".join(str(c) for c in sorted(p.categories))
        lines.append(f"{p.poi_id} (serves {cats})")
    return "\n".join(lines)


def render_prompt(template: PromptTemplate, request: ModificationRequest) -> str:
    """Deterministic prompt text; raises ValueError on missing context."""
    if template.scenario != request.trigger:
        raise ValueError(f"template for {template.scenario!r} used with {request.trigger!r} request")
    state = {
        "agent_id": request.agent_id,
        "base_revision": request.current_chain.revision,
        "activities": [
            {"type": a.activity_type, "start": a.start, "end": a.end, "poi": a.poi}
            for a in request.current_chain.activities
        ],
        "rationale": "",
    }
    horizon = request.current_chain.activities[-1].end if request.current_chain.activities else 86400
    fields = {
        "demographics": _describe_profile(request.profile),
        "chain": _describe_chain(request.current_chain),
        "clock": int(request.current_clock),
        "situation": _describe_situation(request),
        "candidates": _describe_candidates(request),
        "state_json": json.dumps(state, sort_keys=True),
        "horizon": int(horizon),
    }
    try:
        return template.template_text.format(**fields)
    except (KeyError, IndexError) as exc:
        raise ValueError(f"template placeholder missing from context: {exc}") from exc


_FENCE_RE = re.compile(r"```(?:json)?\s*(\{.*?\})\s*```", re.DOTALL)


def parse_response(text: str) -> ChainModification:
    """Extract the structured modification block, tolerating surrounding prose.

    Raises ResponseParseError when no JSON block can be found and
    ResponseSchemaError when the block violates the schema.
    """
    candidates = [m.group(1) for m in _FENCE_RE.finditer(text)]
    if not candidates:
        # fall back to the largest brace-balanced span mentioning "activities"
        start = text.find("{")
        while start != -1:
            depth = 0
            for i in range(start, len(text)):
                if text[i] == "{":
                    depth += 1
                elif text[i] == "}":
                    depth -= 1
                    if depth == 0:
                        span = text[start:i + 1]
                        if '"activities"' in span:
                            candidates.append(span)
                        break
            start = text.find("{", start + 1)
    doc = None
    for cand in candidates:
        try:
            parsed = json.loads(cand)
        except json.JSONDecodeError:
            continue
        if isinstance(parsed, dict) and "activities" in parsed:
            doc = parsed
            break
    if doc is None:
        raise ResponseParseError("no parsable modification block in response")

    try:
        acts = [
            Activity(activity_type=int(a["type"]), start=float(a["start"]),
                     end=float(a["end"]), poi=str(a["poi"]))
            for a in doc["activities"]
        ]
        mod = ChainModification(
            agent_id=str(doc["agent_id"]),
            base_revision=int(doc["base_revision"]),
            new_activities=acts,
            rationale=str(doc.get("rationale", "")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ResponseSchemaError(f"modification block violates schema: {exc}") from exc
    for i, a in enumerate(mod.new_activities):
        if not (1 <= a.activity_type <= 15):
            raise ResponseSchemaError(f"activity {i}: unknown code {a.activity_type}")
        if a.end <= a.start:
            raise ResponseSchemaError(f"activity {i}: end {a.end} <= start {a.start}")
    return mod


# --------------------------------------------------------------- validation


def _poi_closed(poi: Poi, net: RoadNetwork, closures) -> bool:
    if net.edges[poi.attached_edge].closed:
        return True
    for spec in closures:
        region = getattr(spec, "region", None)
        if region is not None:
            (cx, cy), r = region
            if (poi.position[0] - cx) ** 2 + (poi.position[1] - cy) ** 2 <= r * r:
                return True
        for eid in (getattr(spec, "edges", None) or []):
            if eid == poi.attached_edge:
                return True
    return False


def validate_modification(
    mod: ChainModification,
    request: ModificationRequest,
    world: World,
    net: RoadNetwork,
    weights: dict[str, float] | None = None,
    closures=(),
) -> tuple[ActivityChain | None, str | None]:
    """Gate a proposed modification; returns (accepted_chain, None) or
    (None, machine-readable rejection reason)."""
    base = request.current_chain
    if mod.base_revision != base.revision:
        return None, "stale-revision"

    clock = request.current_clock
    past = [a for a in base.activities if a.end <= clock]
    if mod.new_activities[: len(past)] != past:
        return None, "past-immutable"

    horizon = base.activities[-1].end if base.activities else 86400
    chain = ActivityChain(agent_id=base.agent_id, activities=list(mod.new_activities),
                          revision=base.revision)
    probs = chain_violations(chain, world=world, horizon=horizon)
    if probs:
        return None, f"invalid-chain: {probs[0]}"

    base_acts = set(base.activities)
    for a in mod.new_activities:
        if a.end > clock and _poi_closed(world.pois[a.poi], net, closures):
            # a pre-existing commitment at a now-closed POI is tolerated (the
            # execution layer drops the trip); the modifier must not introduce
            # or move destinations into a closed area
            if a in base_acts:
                continue
            return None, f"destination-closed: {a.poi}"

    if weights is not None:
        oracle = TravelTimeOracle(net, weights)
        acts = mod.new_activities
        for i in range(len(acts) - 1):
            a, b = acts[i], acts[i + 1]
            if b.start <= clock:
                continue  # already-departed legs are judged by the base schedule
            pa, pb = world.pois[a.poi], world.pois[b.poi]
            if pa.attached_edge == pb.attached_edge:
                continue
            tt = oracle.between(pa.attached_edge, pb.attached_edge)
            if math.isinf(tt) or b.start - a.end + 1e-9 < tt:
                return None, f"travel-infeasible: gap {i}->{i + 1}"

    accepted = ActivityChain(agent_id=base.agent_id, activities=list(mod.new_activities),
                             revision=base.revision + 1)
    return accepted, None


# --------------------------------------------------------------- rule backend


def _is_flexible(code: int) -> bool:
    return code not in INFLEXIBLE_CODES


class RuleBackend:
    """Deterministic modification rules standing in for the language model.

    closure: relocate affected flexible activities to the nearest open POI
    serving the same code, keeping the time slot. congestion (index >= the
    threshold): halve the next flexible activity's duration, floor 10 min.
    event: insert the event activity, reshaping Home time and
    shifting/truncating flexible activities; Work/School are never touched.
    """

    deterministic = True

    def __init__(self, world: World, net: RoadNetwork,
                 weights: dict[str, float] | None = None, closures=()):
        self.world = world
        self.net = net
        self.weights = weights
        self.closures = closures

    def propose(self, request: ModificationRequest, feedback: str | None = None) -> ChainModification:
        if request.trigger == TRIGGER_CLOSURE:
            acts = self._relocate_closed(request)
        elif request.trigger == TRIGGER_CONGESTION:
            acts = self._shorten_next_flexible(request)
        elif request.trigger == TRIGGER_EVENT:
            acts = self._insert_event(request)
        else:
            raise ValueError(f"unknown trigger {request.trigger!r}")
        return ChainModification(
            agent_id=request.agent_id,
            base_revision=request.current_chain.revision,
            new_activities=acts,
            rationale=f"rule backend: {request.trigger}",
        )

    # -- closure

    def _open_candidates(self, code: int, request) -> list[Poi]:
        pool = request.candidate_pois or self.world.serving_pois(code)
        return [p for p in pool
                if code in p.categories and not _poi_closed(p, self.net, self.closures)]

    def _gap_feasible(self, prev: Activity | None, nxt: Activity | None, cand: Poi,
                      slot_start: float, slot_end: float) -> bool:
        oracle = TravelTimeOracle(self.net, self.weights) if self.weights else None

        def tt(edge_a, edge_b):
            if edge_a == edge_b:
                return 0.0
            if oracle is not None:
                return oracle.between(edge_a, edge_b)
            return self.world.freeflow.between(edge_a, edge_b)

        if prev is not None:
            t = tt(self.world.pois[prev.poi].attached_edge, cand.attached_edge)
            if math.isinf(t) or slot_start - prev.end + 1e-9 < t:
                return False
        if nxt is not None:
            t = tt(cand.attached_edge, self.world.pois[nxt.poi].attached_edge)
            if math.isinf(t) or nxt.start - slot_end + 1e-9 < t:
                return False
        return True

    def _relocate_closed(self, request: ModificationRequest) -> list[Activity]:
        clock = request.current_clock
        acts = list(request.current_chain.activities)
        out: list[Activity] = []
        for i, a in enumerate(acts):
            if a.end <= clock:
                out.append(a)
                continue
            poi = self.world.pois[a.poi]
            if not _poi_closed(poi, self.net, self.closures):
                out.append(a)
                continue
            if not _is_flexible(a.activity_type):
                out.append(a)  # never relocate Home/Work/School; validation decides
                continue
            prev = out[-1] if out else None
            nxt = acts[i + 1] if i + 1 < len(acts) else None
            relocated = None
            candidates = sorted(
                self._open_candidates(a.activity_type, request),
                key=lambda p: (math.dist(p.position, poi.position), p.poi_id),
            )
            for cand in candidates:
                if self._gap_feasible(prev, nxt, cand, a.start, a.end):
                    relocated = replace(a, poi=cand.poi_id)
                    break
            if relocated is not None:
                out.append(relocated)
            # else: drop the activity, merging the gap
        return out

    # -- congestion

    def _shorten_next_flexible(self, request: ModificationRequest) -> list[Activity]:
        threshold = float(request.context.get("threshold", 3.0))
        index = float(request.context.get("congestion_index", 0.0))
        acts = list(request.current_chain.activities)
        if index < threshold:
            return acts
        clock = request.current_clock
        for i, a in enumerate(acts):
            if a.end <= clock or a.start < clock:
                continue
            if _is_flexible(a.activity_type):
                dur = a.end - a.start
                new_dur = max(MIN_TRUNCATED_DURATION_S, dur / 2.0)
                if new_dur < dur:
                    acts[i] = replace(a, end=a.start + new_dur)
                break
        return acts

    # -- event

    def _insert_event(self, request: ModificationRequest) -> list[Activity]:
        ctx = request.context
        venue = self.world.pois[ctx["venue"]]
        ev_start = float(ctx["start"])
        ev_end = ev_start + float(ctx["duration"])
        code = int(ctx.get("activity_code", ActivityCode.RECREATIONAL))
        clock = request.current_clock
        base = list(request.current_chain.activities)
        horizon = base[-1].end
        home_poi = base[-1].poi

        def tt(poi_a: str, poi_b: str) -> float:
            ea = self.world.pois[poi_a].attached_edge
            eb = self.world.pois[poi_b].attached_edge
            return 0.0 if ea == eb else self.world.freeflow.between(ea, eb)

        if ev_start <= clock or ev_end >= horizon:
            return base  # cannot attend: event window not inside the remaining day
        # hard conflicts with immovable commitments
        for a in base:
            if a.end > clock and not _is_flexible(a.activity_type) and a.activity_type != ActivityCode.HOME:
                if a.start < ev_end and a.end > ev_start:
                    return base  # not attending

        event_act = Activity(code, ev_start, ev_end, venue.poi_id)

        head: list[Activity] = []
        tail: list[Activity] = []
        for a in base:
            if a.end <= clock:
                head.append(a)
            elif a.end <= ev_start:
                head.append(a)
            elif a.start >= ev_end:
                tail.append(a)
            else:
                # overlaps the event window: keep the leading part if long enough
                lead_end = ev_start - tt(a.poi, venue.poi_id)
                if a.start < clock or lead_end - a.start >= MIN_KEPT_ACTIVITY_S:
                    head.append(replace(a, end=math.floor(min(a.end, max(a.start + 1, lead_end)))))
                # trailing part of the final Home activity is rebuilt below

        # walk back: the last head activity must leave room to reach the venue
        while head:
            last = head[-1]
            need = last.end + tt(last.poi, venue.poi_id)
            if need <= ev_start + 1e-9:
                break
            if last.end <= clock or not _is_flexible(last.activity_type):
                if last.activity_type == ActivityCode.HOME and last.end > clock:
                    fit_end = math.floor(ev_start - tt(last.poi, venue.poi_id))
                    if fit_end - last.start >= MIN_KEPT_ACTIVITY_S or last.start == 0:
                        if fit_end > last.start:
                            head[-1] = replace(last, end=fit_end)
                            break
                return base  # cannot make it without touching immovable commitments
            fit_end = math.floor(ev_start - tt(last.poi, venue.poi_id))
            if fit_end - last.start >= MIN_KEPT_ACTIVITY_S:
                head[-1] = replace(last, end=fit_end)
            else:
                head.pop()

        if not head:
            return base

        out = head + [event_act]
        # repack the tail after the event; drop what no longer fits
        cur = event_act
        for a in tail:
            earliest = math.ceil(cur.end + tt(cur.poi, a.poi))
            if a.end - max(a.start, earliest) < MIN_KEPT_ACTIVITY_S and a.end < horizon:
                continue  # dropped
            start = max(a.start, earliest)
            if start >= a.end:
                if a.end >= horizon:
                    start = min(start, horizon - 1)
                    out.append(replace(a, start=start))
                    cur = out[-1]
                continue
            out.append(replace(a, start=start))
            cur = out[-1]

        # guarantee the day still ends at home
        last = out[-1]
        if last.activity_type != ActivityCode.HOME or last.end < horizon:
            start = math.ceil(last.end + tt(last.poi, home_poi))
            if start >= horizon:
                return base
            out.append(Activity(int(ActivityCode.HOME), start, horizon, home_poi))
        return out


# --------------------------------------------------------------- LLM backend


class LLMBackend:
    """Chat-completion HTTP backend. Endpoint/model/temperature/timeout come
    from config; the API key is read from an environment variable."""

    deterministic = False

    def __init__(self, endpoint: str, model: str = "default", temperature: float = 0.2,
                 timeout_s: float = 30.0, api_key: str | None = None,
                 templates: dict[str, PromptTemplate] | None = None,
                 session: "_requests.Session | None" = None):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.temperature = temperature
        self.timeout_s = timeout_s
        self.api_key = api_key
        self.templates = templates or DEFAULT_TEMPLATES
        self._session = session or _requests.Session()

    def propose(self, request: ModificationRequest, feedback: str | None = None) -> ChainModification:
        template = self.templates[request.trigger]
        prompt = render_prompt(template, request)
        if feedback:
            prompt += (f"\n\nYour previous answer was rejected: {feedback}. "
                       f"Fix exactly that problem and answer again.")
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "user", "content": prompt}],
        }
        try:
            resp = self._session.post(f"{self.endpoint}/chat/completions", json=body,
                                      headers=headers, timeout=self.timeout_s)
            resp.raise_for_status()
            content = resp.json()["choices"][0]["message"]["content"]
        except (_requests.RequestException, KeyError, IndexError, ValueError) as exc:
            raise BackendUnreachableError(f"LLM service error: {exc}") from exc
        return parse_response(content)


# --------------------------------------------------------------- batching


@dataclass
class RequestOutcome:
    agent_id: str
    trigger: str
    status: str                      # accepted | fallback_accepted | failed
    chain: ActivityChain | None
    reason: str | None = None


@dataclass
class BatchResult:
    outcomes: list[RequestOutcome]
    wall_s: float
    agents_per_minute: float
    max_in_flight: int

    @property
    def accepted(self) -> list[ActivityChain]:
        return [o.chain for o in self.outcomes if o.chain is not None]

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for o in self.outcomes:
            out[o.status] = out.get(o.status, 0) + 1
        return out


def modify_batch(
    requests_list: list[ModificationRequest],
    backend,
    pool_size: int,
    world: World,
    net: RoadNetwork,
    weights: dict[str, float] | None = None,
    closures=(),
    fallback: RuleBackend | None = None,
) -> BatchResult:
    """Process modification requests with at most pool_size in flight.

    Every request resolves to accepted, fallback_accepted or failed. The
    outcome list preserves request order regardless of completion order.
    """
    if pool_size < 1:
        raise ValueError("pool_size must be >= 1")
    if fallback is None:
        fallback = RuleBackend(world, net, weights=weights, closures=closures)

    lock = threading.Lock()
    in_flight = 0
    max_in_flight = 0

    def tracked_propose(bk, req, feedback=None):
        nonlocal in_flight, max_in_flight
        with lock:
            in_flight += 1
            max_in_flight = max(max_in_flight, in_flight)
        try:
            return bk.propose(req, feedback=feedback)
        finally:
            with lock:
                in_flight -= 1

    def validate(mod, req):
        return validate_modification(mod, req, world, net, weights=weights, closures=closures)

    def process(req: ModificationRequest) -> RequestOutcome:
        reason = None
        unreachable = False
        try:
            mod = tracked_propose(backend, req)
            chain, reason = validate(mod, req)
            if chain is not None:
                return RequestOutcome(req.agent_id, req.trigger, "accepted", chain)
        except BackendUnreachableError as exc:
            reason, unreachable = str(exc), True
        except (ResponseParseError, ResponseSchemaError) as exc:
            reason = str(exc)
        # one validation-guided retry unless the backend is unreachable
        if not unreachable:
            try:
                mod = tracked_propose(backend, req, feedback=reason)
                chain, retry_reason = validate(mod, req)
                if chain is not None:
                    return RequestOutcome(req.agent_id, req.trigger, "accepted", chain)
                reason = retry_reason
            except (BackendUnreachableError, ResponseParseError, ResponseSchemaError) as exc:
                reason = str(exc)
        # rule fallback
        try:
            mod = fallback.propose(req)
            chain, fb_reason = validate(mod, req)
            if chain is not None:
                return RequestOutcome(req.agent_id, req.trigger, "fallback_accepted", chain)
            return RequestOutcome(req.agent_id, req.trigger, "failed", None, fb_reason)
        except Exception as exc:  # rule backend must never take the batch down
            return RequestOutcome(req.agent_id, req.trigger, "failed", None, str(exc))

    t0 = time.perf_counter()
    if backend is fallback or getattr(backend, "deterministic", False):
        # deterministic backends gain nothing from threads; keep it sequential
        outcomes = [_rule_process(req, backend, validate) for req in requests_list]
    else:
        with ThreadPoolExecutor(max_workers=pool_size) as pool:
            outcomes = list(pool.map(process, requests_list))
    wall = time.perf_counter() - t0
    per_min = len(requests_list) / wall * 60.0 if wall > 0 else math.inf
    return BatchResult(outcomes=outcomes, wall_s=wall, agents_per_minute=per_min,
                       max_in_flight=max_in_flight)


def _rule_process(req, backend, validate) -> RequestOutcome:
    try:
        mod = backend.propose(req)
        chain, reason = validate(mod, req)
    except Exception as exc:
        return RequestOutcome(req.agent_id, req.trigger, "failed", None, str(exc))
    if chain is not None:
        return RequestOutcome(req.agent_id, req.trigger, "accepted", chain)
    return RequestOutcome(req.agent_id, req.trigger, "failed", None, reason)
