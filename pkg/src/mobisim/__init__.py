"""Agent-based urban mobility simulator.

Pipeline: load a road network and POI catalog, generate demographic-
conditioned daily activity chains, execute them on a mesoscopic traffic
engine, and adaptively rewrite schedules in response to closures, congestion
and special events through a rule-based or LLM-backed modifier. A TCP/
WebSocket gateway exposes live snapshots and intervention commands.
"""

from .chainsynth import (
    Activity,
    ActivityChain,
    chain_violations,
    generate_chain,
    generate_population_chains,
    load_chains,
    save_chains,
)
from .errors import MobisimError
from .netgraph import Edge, RoadNetwork, Route, apply_closure, load_network, shortest_route
from .orchestrator import AgentDatabase, RunConfig, RunReport, Runtime, run
from .scenario import ClosureSpec, EventSpec, Scenario, interest_score, load_scenario, select_attendees
from .worldmodel import (
    ActivityCode,
    DemographicProfile,
    Poi,
    World,
    build_world,
    load_pois,
    load_population,
    match_poi,
)

__version__ = "0.1.0"

__all__ = [
    "Activity", "ActivityChain", "ActivityCode", "AgentDatabase", "ClosureSpec",
    "DemographicProfile", "Edge", "EventSpec", "MobisimError", "Poi", "RoadNetwork",
    "Route", "RunConfig", "RunReport", "Runtime", "Scenario", "World",
    "apply_closure", "build_world", "chain_violations", "generate_chain",
    "generate_population_chains", "interest_score", "load_chains", "load_network",
    "load_pois", "load_population", "load_scenario", "match_poi", "run",
    "save_chains", "select_attendees", "shortest_route",
]
