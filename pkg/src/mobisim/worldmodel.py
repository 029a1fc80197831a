"""Population, POI catalog, activity taxonomy and activity-to-POI matching.

Population and POI files are JSON arrays; see docs/file_formats.md. The POI
loader snaps each POI to the nearest edge midpoint (KD-tree over midpoints)
and rejects POIs farther than 200 m from any edge.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from random import Random

from scipy.spatial import cKDTree

from .errors import FileFormatError, GenerationError, UnknownElementError
from .netgraph import RoadNetwork, TravelTimeOracle, free_flow_oracle
from .streams import derive_rng

SNAP_RADIUS_M = 200.0
DEFAULT_DISTANCE_DECAY_M = 1000.0

EMPLOYMENT_STATUSES = ("employed", "student", "retired", "unemployed")
INCOME_BRACKETS = (1, 2, 3, 4, 5)  # ordinal, 1 = lowest


class ActivityCode(IntEnum):
    HOME = 1
    WORK = 2
    SCHOOL = 3
    CAREGIVING = 4
    BUY_GOODS = 5
    BUY_SERVICES = 6
    BUY_MEALS = 7
    GENERAL_ERRANDS = 8
    RECREATIONAL = 9
    EXERCISE = 10
    VISIT_FRIENDS = 11
    HEALTH_CARE = 12
    RELIGIOUS = 13
    SOMETHING_ELSE = 14
    DROP_OFF_PICK_UP = 15


ACTIVITY_LABELS = {
    ActivityCode.HOME: "Home",
    ActivityCode.WORK: "Work",
    ActivityCode.SCHOOL: "School",
    ActivityCode.CAREGIVING: "Caregiving",
    ActivityCode.BUY_GOODS: "Buy goods",
    ActivityCode.BUY_SERVICES: "Buy services",
    ActivityCode.BUY_MEALS: "Buy meals",
    ActivityCode.GENERAL_ERRANDS: "General errands",
    ActivityCode.RECREATIONAL: "Recreational",
    ActivityCode.EXERCISE: "Exercise",
    ActivityCode.VISIT_FRIENDS: "Visit friends",
    ActivityCode.HEALTH_CARE: "Health care",
    ActivityCode.RELIGIOUS: "Religious",
    ActivityCode.SOMETHING_ELSE: "Something else",
    ActivityCode.DROP_OFF_PICK_UP: "Drop off/Pick up",
}

# Home/Work/School anchor the day; everything else may be moved or shortened.
INFLEXIBLE_CODES = frozenset({ActivityCode.HOME, ActivityCode.WORK, ActivityCode.SCHOOL})


def activity_label(code: int) -> str:
    return ACTIVITY_LABELS[ActivityCode(code)]


@dataclass
class DemographicProfile:
    agent_id: str
    age: int
    gender: str
    income_bracket: int
    employment_status: str
    education_level: int
    household_size: int
    vehicle_access: bool
    home_poi: str | None = None   # fixed at world init so chains stay anchored
    work_poi: str | None = None   # Work for employed, School for students
    school_poi: str | None = None

    def validate(self) -> None:
        if self.age < 0:
            raise ValueError(f"agent {self.agent_id}: age must be >= 0, got {self.age}")
        if self.household_size < 1:
            raise ValueError(f"agent {self.agent_id}: household_size must be >= 1")
        if self.employment_status not in EMPLOYMENT_STATUSES:
            raise ValueError(
                f"agent {self.agent_id}: employment_status {self.employment_status!r} "
                f"not one of {EMPLOYMENT_STATUSES}"
            )
        if self.income_bracket not in INCOME_BRACKETS:
            raise ValueError(f"agent {self.agent_id}: income_bracket must be in {INCOME_BRACKETS}")


@dataclass
class Poi:
    poi_id: str
    name: str
    categories: frozenset[int]     # ActivityCode values this POI can serve
    position: tuple[float, float]  # meters
    attached_edge: str


def load_population(path: str | Path) -> list[DemographicProfile]:
    """Load and validate the population file; errors carry the record index."""
    path = Path(path)
    try:
        records = json.loads(path.read_text())
    except OSError as exc:
        raise FileFormatError(f"cannot read population file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"population file {path} is not valid JSON: {exc}") from exc
    if not isinstance(records, list):
        raise FileFormatError(f"population file {path} must be a JSON array")

    profiles: list[DemographicProfile] = []
    seen: set[str] = set()
    for i, rec in enumerate(records):
        try:
            p = DemographicProfile(
                agent_id=str(rec["agent_id"]),
                age=int(rec["age"]),
                gender=str(rec["gender"]),
                income_bracket=int(rec["income_bracket"]),
                employment_status=str(rec["employment_status"]),
                education_level=int(rec["education_level"]),
                household_size=int(rec["household_size"]),
                vehicle_access=bool(rec["vehicle_access"]),
                home_poi=rec.get("home_poi"),
                work_poi=rec.get("work_poi"),
                school_poi=rec.get("school_poi"),
            )
            p.validate()
        except (KeyError, TypeError, ValueError) as exc:
            raise FileFormatError(f"population record {i}: {exc}") from exc
        if p.agent_id in seen:
            raise FileFormatError(f"population record {i}: duplicate agent_id {p.agent_id!r}")
        seen.add(p.agent_id)
        profiles.append(p)
    return profiles


def load_pois(path: str | Path, net: RoadNetwork) -> tuple[list[Poi], list[dict]]:
    """Load POIs and snap each to the nearest edge midpoint within 200 m.

    Returns (pois, rejected) where rejected lists {"poi_id", "distance"} for
    POIs farther than 200 m from every edge.
    """
    path = Path(path)
    try:
        records = json.loads(path.read_text())
    except OSError as exc:
        raise FileFormatError(f"cannot read POI file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"POI file {path} is not valid JSON: {exc}") from exc
    if not isinstance(records, list) or not records:
        raise FileFormatError(f"POI file {path} must be a non-empty JSON array")

    edge_ids = list(net.edges)
    midpoints = [net.edge_midpoint(eid) for eid in edge_ids]
    tree = cKDTree(midpoints)

    pois: list[Poi] = []
    rejected: list[dict] = []
    seen: set[str] = set()
    for i, rec in enumerate(records):
        try:
            poi_id = str(rec["poi_id"])
            cats = frozenset(int(ActivityCode(int(c))) for c in rec["categories"])
            pos = (float(rec["x"]), float(rec["y"]))
            name = str(rec.get("name", poi_id))
        except (KeyError, TypeError, ValueError) as exc:
            raise FileFormatError(f"POI record {i}: {exc}") from exc
        if not cats:
            raise FileFormatError(f"POI record {i} ({poi_id}): empty category set")
        if poi_id in seen:
            raise FileFormatError(f"POI record {i}: duplicate poi_id {poi_id!r}")
        seen.add(poi_id)

        dist, idx = tree.query(pos)
        if dist > SNAP_RADIUS_M:
            rejected.append({"poi_id": poi_id, "distance": float(dist)})
            continue
        # paired directed edges share a midpoint, so ties are common; break
        # them toward the smallest edge id to stay deterministic
        tied = tree.query_ball_point(pos, float(dist) + 1e-9)
        attached = min(edge_ids[int(j)] for j in tied)
        pois.append(Poi(poi_id=poi_id, name=name, categories=cats, position=pos,
                        attached_edge=attached))
    return pois, rejected


def match_poi(
    activity: int,
    profile: DemographicProfile,
    anchor: tuple[float, float],
    pois: list[Poi],
    rng: Random,
    decay_m: float = DEFAULT_DISTANCE_DECAY_M,
) -> Poi:
    """Sample a POI serving `activity`, weighted by exp(-distance/decay_m).

    Deterministic given the rng state. Raises GenerationError when no POI in
    `pois` serves the requested code.
    """
    code = int(activity)
    candidates = [p for p in pois if code in p.categories]
    if not candidates:
        raise GenerationError(
            f"no POI serves activity {activity_label(code)!r} (code {code}) for agent {profile.agent_id}"
        )
    ax, ay = anchor
    dists = [math.hypot(p.position[0] - ax, p.position[1] - ay) for p in candidates]
    # shift by the minimum: same distribution (common factor cancels), but the
    # nearest candidate keeps weight 1.0 even in the decay -> 0 limit
    d_min = min(dists)
    weights = [math.exp(-(d - d_min) / decay_m) for d in dists]
    return rng.choices(candidates, weights=weights, k=1)[0]


@dataclass
class World:
    """Immutable-after-load bundle of network, POIs and population."""

    net: RoadNetwork
    pois: dict[str, Poi]
    population: dict[str, DemographicProfile]
    calibration: dict = field(default_factory=dict)
    distance_decay_m: float = DEFAULT_DISTANCE_DECAY_M
    pois_by_category: dict[int, list[Poi]] = field(default_factory=dict)
    _freeflow: TravelTimeOracle | None = None

    def __post_init__(self):
        if not self.pois_by_category:
            by_cat: dict[int, list[Poi]] = {}
            for p in self.pois.values():
                for c in sorted(p.categories):
                    by_cat.setdefault(c, []).append(p)
            self.pois_by_category = by_cat

    @property
    def freeflow(self) -> TravelTimeOracle:
        if self._freeflow is None:
            self._freeflow = free_flow_oracle(self.net)
        return self._freeflow

    def poi(self, poi_id: str) -> Poi:
        try:
            return self.pois[poi_id]
        except KeyError:
            raise UnknownElementError(f"unknown POI {poi_id!r}") from None

    def profile(self, agent_id: str) -> DemographicProfile:
        try:
            return self.population[agent_id]
        except KeyError:
            raise UnknownElementError(f"unknown agent {agent_id!r}") from None

    def serving_pois(self, code: int) -> list[Poi]:
        return self.pois_by_category.get(int(code), [])

    def travel_time(self, from_poi: Poi, to_poi: Poi) -> float:
        """Free-flow travel time between two POIs' attached edges."""
        if from_poi.attached_edge == to_poi.attached_edge:
            return 0.0
        return self.freeflow.between(from_poi.attached_edge, to_poi.attached_edge)

    def match_poi(self, activity: int, profile: DemographicProfile,
                  anchor: tuple[float, float], rng: Random,
                  pois: list[Poi] | None = None) -> Poi:
        return match_poi(activity, profile, anchor,
                         pois if pois is not None else self.serving_pois(activity),
                         rng, decay_m=self.distance_decay_m)


def assign_anchors(world: World, seed: int) -> None:
    """Fix each agent's home (and work/school) POI once, before generation.

    Per-agent streams derived from (seed, agent_id) keep assignment independent
    of population ordering. Profiles that already carry anchors keep them.
    """
    homes = world.serving_pois(ActivityCode.HOME)
    if not homes:
        raise GenerationError("no POI serves activity 'Home' (code 1)")
    for agent_id in world.population:
        p = world.population[agent_id]
        rng = derive_rng(seed, "anchor", agent_id)
        if p.home_poi is None:
            p.home_poi = rng.choice(homes).poi_id
        home_pos = world.poi(p.home_poi).position
        if p.employment_status == "employed" and p.work_poi is None:
            p.work_poi = world.match_poi(ActivityCode.WORK, p, home_pos, rng).poi_id
        if p.employment_status == "student" and p.school_poi is None:
            p.school_poi = world.match_poi(ActivityCode.SCHOOL, p, home_pos, rng).poi_id


def build_world(
    net: RoadNetwork,
    pois: list[Poi],
    profiles: list[DemographicProfile],
    calibration: dict | None = None,
    anchor_seed: int | None = None,
    distance_decay_m: float = DEFAULT_DISTANCE_DECAY_M,
) -> World:
    world = World(
        net=net,
        pois={p.poi_id: p for p in pois},
        population={p.agent_id: p for p in profiles},
        calibration=calibration or {},
        distance_decay_m=distance_decay_m,
    )
    if anchor_seed is not None:
        assign_anchors(world, anchor_seed)
    return world
