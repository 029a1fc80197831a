"""Daily activity chain generation conditioned on demographics.

The generator is a role-conditioned semi-Markov walk: each employment role has
a transition matrix over the 15 activity codes, plus truncated-normal start
and duration parameters, all read from a calibration config (JSON). The
shipped default calibration is synthetic (hand-shaped, not survey-derived).

Chains start at Home at t=0 and end at Home at the horizon. Between
consecutive activities the schedule always leaves at least the free-flow
travel time between their POIs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from random import Random

from .errors import FileFormatError, GenerationError
from .streams import derive_rng
from .worldmodel import ActivityCode, World, activity_label

DEFAULT_HORIZON_S = 86_400
MAX_HORIZON_S = 172_800
MIN_ACTIVITY_S = 300


@dataclass(frozen=True)
class Activity:
    activity_type: int
    start: float  # seconds since simulation start
    end: float
    poi: str


@dataclass
class ActivityChain:
    agent_id: str
    activities: list[Activity]
    revision: int = 0

    def future_activities(self, clock: float) -> list[Activity]:
        return [a for a in self.activities if a.end > clock]

    def to_dict(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "revision": self.revision,
            "activities": [
                {"type": a.activity_type, "start": a.start, "end": a.end, "poi": a.poi}
                for a in self.activities
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ActivityChain":
        return cls(
            agent_id=str(doc["agent_id"]),
            revision=int(doc.get("revision", 0)),
            activities=[
                Activity(activity_type=int(a["type"]), start=float(a["start"]),
                         end=float(a["end"]), poi=str(a["poi"]))
                for a in doc["activities"]
            ],
        )


def chain_violations(
    chain: ActivityChain,
    world: World | None = None,
    horizon: float = DEFAULT_HORIZON_S,
) -> list[str]:
    """All invariant violations of a chain (empty list = valid).

    With a world, additionally checks POI existence, category service and
    free-flow travel feasibility of every gap.
    """
    probs: list[str] = []
    acts = chain.activities
    if not acts:
        return ["chain is empty"]
    if acts[0].activity_type != ActivityCode.HOME or acts[0].start != 0:
        probs.append("first activity must be Home starting at 0")
    if acts[-1].activity_type != ActivityCode.HOME:
        probs.append("last activity must be Home")
    for i, a in enumerate(acts):
        if not (1 <= a.activity_type <= 15):
            probs.append(f"activity {i}: unknown code {a.activity_type}")
        if not (0 <= a.start < a.end <= horizon):
            probs.append(f"activity {i}: times ({a.start}, {a.end}) outside 0..{horizon}")
    for i in range(len(acts) - 1):
        if acts[i].end > acts[i + 1].start:
            probs.append(f"activities {i}->{i + 1} overlap ({acts[i].end} > {acts[i + 1].start})")
    if world is not None:
        for i, a in enumerate(acts):
            if a.poi not in world.pois:
                probs.append(f"activity {i}: unknown POI {a.poi!r}")
            elif a.activity_type not in world.pois[a.poi].categories:
                probs.append(f"activity {i}: POI {a.poi!r} does not serve code {a.activity_type}")
        for i in range(len(acts) - 1):
            a, b = acts[i], acts[i + 1]
            if a.poi in world.pois and b.poi in world.pois:
                tt = world.travel_time(world.pois[a.poi], world.pois[b.poi])
                gap = b.start - a.end
                if gap + 1e-9 < tt:
                    probs.append(f"gap {i}->{i + 1} of {gap}s below free-flow travel time {tt:.1f}s")
    return probs


def default_calibration() -> dict:
    text = resources.files("mobisim").joinpath("data/default_calibration.json").read_text()
    return json.loads(text)


def load_calibration(path: str | Path) -> dict:
    path = Path(path)
    try:
        cal = json.loads(path.read_text())
    except OSError as exc:
        raise FileFormatError(f"cannot read calibration file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"calibration file {path} is not valid JSON: {exc}") from exc
    for role in ("employed", "student", "retired", "unemployed"):
        if role not in cal.get("roles", {}):
            raise FileFormatError(f"calibration file {path} missing role {role!r}")
    return cal


def _trunc_normal(rng: Random, cfg: dict) -> float:
    lo, hi = cfg["min"], cfg["max"]
    for _ in range(64):
        x = rng.gauss(cfg["mean"], cfg["std"])
        if lo <= x <= hi:
            return x
    return min(max(cfg["mean"], lo), hi)


def _sample_code(rng: Random, dist: dict[str, float]) -> int:
    codes = list(dist.keys())
    return int(rng.choices(codes, weights=[dist[c] for c in codes], k=1)[0])


def generate_chain(
    profile,
    world: World,
    rng: Random,
    horizon: float | None = None,
) -> ActivityChain:
    """Generate one agent's daily chain from its demographic profile.

    Raises GenerationError when a required POI category is unavailable (e.g.
    an employed agent with no Work POI anywhere in the catalog).
    """
    cal = world.calibration or default_calibration()
    role_cfg = cal["roles"][profile.employment_status]
    code_cfg = cal["codes"]
    horizon = float(horizon if horizon is not None else cal.get("horizon", DEFAULT_HORIZON_S))
    if not (0 < horizon <= MAX_HORIZON_S):
        raise GenerationError(f"horizon {horizon} outside (0, {MAX_HORIZON_S}]")
    if horizon.is_integer():
        horizon = int(horizon)  # keeps chain dumps integer-typed
    min_tail = float(cal.get("min_home_tail", 900))

    if profile.home_poi is None:
        raise GenerationError(f"agent {profile.agent_id}: no home POI assigned")
    home = world.poi(profile.home_poi)

    acts: list[Activity] = []
    wake = math.floor(_trunc_normal(rng, role_cfg["wake"]))
    wake = max(MIN_ACTIVITY_S, min(wake, horizon))
    acts.append(Activity(int(ActivityCode.HOME), 0, wake, home.poi_id))
    cur_t: float = wake
    cur_poi = home

    # mandatory anchor activity (Work for employed, School for students)
    req = role_cfg.get("required")
    if req is not None and rng.random() < req.get("probability", 1.0):
        code = int(req["code"])
        anchor_id = profile.work_poi if code == ActivityCode.WORK else profile.school_poi
        if anchor_id is None:
            # no pre-fixed anchor: fall back to catalog matching so the error
            # names the missing category
            anchor_id = world.match_poi(code, profile, home.position, rng).poi_id
        apoi = world.poi(anchor_id)
        tt = world.travel_time(cur_poi, apoi)
        if math.isinf(tt):
            raise GenerationError(
                f"agent {profile.agent_id}: {activity_label(code)} POI unreachable from home"
            )
        start = math.ceil(max(cur_t + tt, _trunc_normal(rng, req["start"])))
        dur = _trunc_normal(rng, req["duration"])
        back_tt = world.travel_time(apoi, home)
        latest_end = math.floor(horizon - back_tt - min_tail)
        end = math.floor(min(start + dur, latest_end))
        if end - start >= MIN_ACTIVITY_S:
            acts.append(Activity(code, start, end, apoi.poi_id))
            cur_t, cur_poi = end, apoi

    # secondary activities: semi-Markov walk until the time budget runs out
    transitions = role_cfg["transitions"]
    max_secondary = int(cal.get("max_secondary", 8))
    cur_code = acts[-1].activity_type
    for _ in range(max_secondary):
        dist = transitions.get(str(cur_code))
        if not dist:
            break
        nxt = _sample_code(rng, dist)
        if nxt == ActivityCode.HOME and cur_poi.poi_id == home.poi_id:
            break  # heading home while already home ends the day
        if nxt == ActivityCode.HOME:
            poi = home
        else:
            candidates = world.serving_pois(nxt)
            if not candidates:
                break  # optional activity without a serving POI: head home
            poi = world.match_poi(nxt, profile, cur_poi.position, rng, pois=candidates)
        tt = world.travel_time(cur_poi, poi)
        if math.isinf(tt):
            break
        start = cur_t + tt
        pref = code_cfg.get(str(nxt), {}).get("start")
        if pref:
            start = max(start, _trunc_normal(rng, pref))
        start = math.ceil(start)
        dur = _trunc_normal(rng, code_cfg[str(nxt)]["duration"])
        back_tt = world.travel_time(poi, home)
        latest_end = math.floor(horizon - back_tt - min_tail)
        if start + MIN_ACTIVITY_S > latest_end:
            break
        end = math.floor(min(start + dur, latest_end))
        acts.append(Activity(int(nxt), start, end, poi.poi_id))
        cur_t, cur_poi, cur_code = end, poi, int(nxt)

    # close the day at home
    if cur_poi.poi_id == home.poi_id:
        last = acts[-1]
        acts[-1] = replace(last, end=horizon)
    else:
        tt = world.travel_time(cur_poi, home)
        start = math.ceil(cur_t + tt)
        acts.append(Activity(int(ActivityCode.HOME), start, horizon, home.poi_id))

    chain = ActivityChain(agent_id=profile.agent_id, activities=acts, revision=0)
    probs = chain_violations(chain, world, horizon)
    if probs:
        raise GenerationError(f"agent {profile.agent_id}: generated invalid chain: {probs}")
    return chain


def generate_population_chains(
    profiles,
    world: World,
    seed: int,
    horizon: float | None = None,
    max_error_fraction: float = 0.01,
) -> dict[str, ActivityChain]:
    """One chain per agent, from per-agent rng streams derived of (seed, agent_id).

    Results are independent of profile ordering. Per-agent failures are
    tolerated up to max_error_fraction of the population, then aggregated
    into a single GenerationError.
    """
    if not profiles:
        raise GenerationError("no profiles to generate chains for")
    chains: dict[str, ActivityChain] = {}
    errors: dict[str, str] = {}
    for p in profiles:
        rng = derive_rng(seed, "chain", p.agent_id)
        try:
            chains[p.agent_id] = generate_chain(p, world, rng, horizon=horizon)
        except GenerationError as exc:
            errors[p.agent_id] = str(exc)
    if len(errors) > max_error_fraction * len(list(profiles)):
        sample = list(errors.items())[:5]
        raise GenerationError(
            f"{len(errors)} of {len(list(profiles))} agents failed generation; first: {sample}"
        )
    return chains


def save_chains(path: str | Path, chains: dict[str, ActivityChain]) -> None:
    """Canonical chain interchange dump: sorted by agent_id, stable bytes."""
    docs = [chains[aid].to_dict() for aid in sorted(chains)]
    Path(path).write_text(json.dumps(docs, sort_keys=True, separators=(",", ":")) + "\n")


def load_chains(path: str | Path) -> dict[str, ActivityChain]:
    path = Path(path)
    try:
        docs = json.loads(path.read_text())
    except OSError as exc:
        raise FileFormatError(f"cannot read chains file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"chains file {path} is not valid JSON: {exc}") from exc
    out: dict[str, ActivityChain] = {}
    for i, doc in enumerate(docs):
        try:
            chain = ActivityChain.from_dict(doc)
        except (KeyError, TypeError, ValueError) as exc:
            raise FileFormatError(f"chain record {i}: {exc}") from exc
        out[chain.agent_id] = chain
    return out
