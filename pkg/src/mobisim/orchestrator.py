"""Master simulation loop: clock authority, global agent database, departures
and arrivals, trigger dispatch, modification application and run reporting.

The loop is single-threaded. Modification batches run either synchronously
(deterministic rule backend, or when a large disruption pauses the run) or in
a background thread whose results are applied at step boundaries. Gateway
commands are drained at step boundaries as well; nothing else ever mutates
the clock, the network or the agent database.
"""

from __future__ import annotations

import heapq
import json
import math
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import mesosim
from .adaptor import (
    BatchResult,
    ModificationRequest,
    RequestOutcome,
    RuleBackend,
    TRIGGER_CLOSURE,
    modify_batch,
)
from .chainsynth import ActivityChain, save_chains
from .errors import MobisimError, NoPathError
from .mesosim import SimulationState
from .netgraph import RoadNetwork, Route, apply_closure, reopen_edges, shortest_route
from .scenario import Scenario, TriggerTracker, raise_triggers, validate_scenario
from .worldmodel import World

AT_ACTIVITY = mesosim.AT_ACTIVITY
EN_ROUTE = mesosim.EN_ROUTE
FINISHED = mesosim.FINISHED


@dataclass
class RunConfig:
    step_length: float = 1.0
    env_update_period: float = 300.0
    horizon: float = 86_400.0
    seed: int = 0
    pool_size: int = 100
    congestion_threshold: float = 3.0
    pause_threshold: int = 500
    snapshot_period: float = 1.0
    heatmap_period: float = 1800.0
    heatmap_cell_m: float = 500.0
    real_time_factor: float = 0.0  # 0 = run as fast as possible

    def validate(self) -> None:
        if self.step_length <= 0 or self.env_update_period <= 0 or self.horizon <= 0:
            raise ValueError("step_length, env_update_period and horizon must be > 0")
        ratio = self.env_update_period / self.step_length
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("env_update_period must be a multiple of step_length")
        if self.pool_size < 1:
            raise ValueError("pool_size must be >= 1")


@dataclass
class AgentRecord:
    agent_id: str
    profile: object
    chain: ActivityChain
    status: str = AT_ACTIVITY
    current_route: Route | None = None
    position_poi: str | None = None          # physical location when not en route
    pending_target: int = 1                  # chain index the next trip heads to
    adaptation_history: list[tuple[float, str, int]] = field(default_factory=list)
    vehicle: object | None = None            # live mesosim.VehicleState while en route

    @property
    def en_route(self) -> bool:
        return self.status == EN_ROUTE


class AgentDatabase:
    """One record per agent; revisions strictly increase per agent."""

    def __init__(self):
        self._records: dict[str, AgentRecord] = {}

    def add(self, record: AgentRecord) -> None:
        if record.agent_id in self._records:
            raise MobisimError(f"duplicate agent record {record.agent_id!r}")
        self._records[record.agent_id] = record

    def get(self, agent_id: str) -> AgentRecord:
        return self._records[agent_id]

    def __contains__(self, agent_id: str) -> bool:
        return agent_id in self._records

    def __len__(self) -> int:
        return len(self._records)

    def records(self):
        return self._records.values()

    def agent_ids(self):
        return self._records.keys()

    @classmethod
    def from_world(cls, world: World, chains: dict[str, ActivityChain]) -> "AgentDatabase":
        db = cls()
        for agent_id in chains:
            profile = world.profile(agent_id)
            chain = chains[agent_id]
            db.add(AgentRecord(
                agent_id=agent_id,
                profile=profile,
                chain=chain,
                position_poi=chain.activities[0].poi,
            ))
        return db


def pause_for_disruption(affected_count: int, config: RunConfig) -> bool:
    """True when a disruption is large enough that stepping must wait for the
    whole batch to resolve before the simulation resumes."""
    return affected_count >= config.pause_threshold


@dataclass
class RunReport:
    metrics_rows: list[dict] = field(default_factory=list)
    adaptation_log: list[dict] = field(default_factory=list)
    heatmaps: dict[int, np.ndarray] = field(default_factory=dict)
    final_chains: dict[str, ActivityChain] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    METRIC_FIELDS = ("clock", "active_agents", "mean_congestion_index", "arrivals")

    def write(self, outdir: str | Path) -> Path:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        lines = [",".join(self.METRIC_FIELDS)]
        for row in self.metrics_rows:
            lines.append(",".join(str(row[k]) for k in self.METRIC_FIELDS))
        (outdir / "metrics.csv").write_text("\n".join(lines) + "\n")
        with (outdir / "adaptation_log.jsonl").open("w") as fh:
            for rec in self.adaptation_log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        hm_dir = outdir / "heatmaps"
        hm_dir.mkdir(exist_ok=True)
        for clock in sorted(self.heatmaps):
            np.savetxt(hm_dir / f"heatmap_{clock:07d}.txt", self.heatmaps[clock], fmt="%d")
        save_chains(outdir / "final_chains.json", self.final_chains)
        (outdir / "summary.json").write_text(json.dumps(self.summary, sort_keys=True, indent=1) + "\n")
        return outdir


class _BatchJob:
    def __init__(self, future_result=None):
        self.result: BatchResult | None = future_result
        self.thread: threading.Thread | None = None

    def done(self) -> bool:
        return self.thread is None or not self.thread.is_alive()


class Runtime:
    """Mutable run state shared with the gateway (read-only there except for
    the thread-safe command queue)."""

    def __init__(self, world: World, net: RoadNetwork, db: AgentDatabase,
                 config: RunConfig, scenario: Scenario, backend=None):
        config.validate()
        validate_scenario(scenario, net, world)
        self.world = world
        self.net = net
        self.db = db
        self.config = config
        self.scenario = scenario
        self.state = SimulationState()
        self.backend = backend if backend is not None else RuleBackend(world, net)
        self.fallback = RuleBackend(world, net)
        self.tracker = TriggerTracker()
        self.weights = net.free_flow_weights()
        self.paused_by_operator = False
        self.report = RunReport()
        self.total_trips = 0
        self.dropped_activities = 0
        self._departures: list[tuple[float, str, int, int]] = []  # (time, agent, revision, target)
        self._active_closures: dict[str, set[str]] = {}  # closure_id -> edges it closed
        self._pending_jobs: list[_BatchJob] = []
        self._arrival_window = 0
        self._commands: list[dict] = []
        self._commands_lock = threading.Lock()
        self.snapshot_sink = None     # callable(dict) set by the gateway
        self.observers: list = []     # callables(runtime) invoked per env update
        self.pre_dispatch_hooks: list = []  # callables(runtime, requests), pre-batch
        self._cmd_counter = 0

    # ------------------------------------------------------------ commands

    def enqueue_command(self, cmd: dict) -> None:
        """Thread-safe; commands are consumed at the next step boundary."""
        with self._commands_lock:
            self._commands.append(cmd)

    def _drain_commands(self) -> list[dict]:
        with self._commands_lock:
            cmds, self._commands = self._commands, []
        return cmds

    # ------------------------------------------------------------ helpers

    def clock(self) -> float:
        return self.state.clock

    def active_closure_ids(self) -> list[str]:
        return sorted(self._active_closures)

    def active_event_ids(self) -> list[str]:
        clock = self.state.clock
        return sorted(e.event_id for e in self.scenario.events
                      if e.start <= clock < e.start + e.duration)

    def agent_detail(self, agent_id: str) -> dict:
        rec = self.db.get(agent_id)
        return {
            "agent_id": rec.agent_id,
            "profile": {
                "age": rec.profile.age,
                "gender": rec.profile.gender,
                "income_bracket": rec.profile.income_bracket,
                "employment_status": rec.profile.employment_status,
                "education_level": rec.profile.education_level,
                "household_size": rec.profile.household_size,
                "vehicle_access": rec.profile.vehicle_access,
            },
            "status": rec.status,
            "position_poi": rec.position_poi,
            "chain": rec.chain.to_dict(),
            "current_route": list(rec.current_route.edges) if rec.current_route else None,
            "adaptation_history": [
                {"clock": c, "trigger": t, "revision": r} for c, t, r in rec.adaptation_history
            ],
        }

    def _travel_estimate(self, from_edge: str, to_edge: str) -> float:
        if from_edge == to_edge:
            return 0.0
        try:
            r = shortest_route(self.net, from_edge, to_edge, 0.0, self.weights)
        except (NoPathError, MobisimError):
            return math.inf
        return r.estimated_arrival - r.departure_time

    # ------------------------------------------------------------ departures

    def _schedule_next_departure(self, rec: AgentRecord) -> None:
        """Queue the agent's next trip; skips/hops zero-travel targets."""
        clock = self.state.clock
        acts = rec.chain.activities
        while True:
            idx = rec.pending_target
            if idx >= len(acts):
                rec.status = FINISHED if clock >= acts[-1].end else AT_ACTIVITY
                return
            target = acts[idx]
            cur_poi = self.world.pois[rec.position_poi]
            dest_poi = self.world.pois[target.poi]
            if cur_poi.attached_edge == dest_poi.attached_edge:
                # same-edge hop: no vehicle trip, arrive at the activity directly
                if target.end <= clock:
                    rec.pending_target += 1
                    continue
                rec.position_poi = target.poi
                rec.pending_target += 1
                continue
            prev_end = acts[idx - 1].end if idx > 0 else 0.0
            est = self._travel_estimate(cur_poi.attached_edge, dest_poi.attached_edge)
            if math.isinf(est):
                dep = max(clock, prev_end)  # departure will resolve the no-path case
            else:
                dep = max(prev_end, clock, target.start - est)
            heapq.heappush(self._departures, (dep, rec.agent_id, rec.chain.revision, idx))
            return

    def _depart_due_agents(self) -> None:
        clock = self.state.clock
        while self._departures and self._departures[0][0] <= clock:
            _, agent_id, revision, idx = heapq.heappop(self._departures)
            rec = self.db.get(agent_id)
            if rec.chain.revision != revision or rec.pending_target != idx or rec.en_route:
                continue  # stale entry superseded by a modification
            self._start_trip(rec)

    def _start_trip(self, rec: AgentRecord) -> None:
        clock = self.state.clock
        acts = rec.chain.activities
        idx = rec.pending_target
        if idx >= len(acts):
            return
        target = acts[idx]
        origin = self.world.pois[rec.position_poi].attached_edge
        dest = self.world.pois[target.poi].attached_edge
        try:
            route = shortest_route(self.net, origin, dest, clock, self.weights)
        except (NoPathError, MobisimError):
            self._drop_unreachable(rec, idx)
            return
        rec.vehicle = mesosim.insert_vehicle(self.state, self.net, rec.agent_id, route)
        rec.status = EN_ROUTE
        rec.current_route = route
        self.total_trips += 1

    def _drop_unreachable(self, rec: AgentRecord, idx: int) -> None:
        """No open path to the target activity: splice it out and move on."""
        acts = [a for i, a in enumerate(rec.chain.activities) if i != idx]
        rec.chain = ActivityChain(rec.agent_id, acts, revision=rec.chain.revision + 1)
        rec.adaptation_history.append((self.state.clock, TRIGGER_CLOSURE, rec.chain.revision))
        self.report.adaptation_log.append({
            "clock": self.state.clock, "agent_id": rec.agent_id, "trigger": TRIGGER_CLOSURE,
            "revision": rec.chain.revision, "status": "dropped-unreachable",
        })
        self.dropped_activities += 1
        self._schedule_next_departure(rec)

    def _handle_arrivals(self) -> None:
        for clock, agent_id in self.state.arrivals_this_step:
            rec = self.db.get(agent_id)
            idx = min(rec.pending_target, len(rec.chain.activities) - 1)
            rec.status = AT_ACTIVITY
            rec.position_poi = rec.chain.activities[idx].poi
            rec.current_route = None
            rec.vehicle = None
            rec.pending_target = idx + 1
            self._schedule_next_departure(rec)

    # ------------------------------------------------------------ modifications

    def apply_modifications(self, outcomes: list[RequestOutcome]) -> int:
        """Write accepted chains to the database and replan affected trips.

        Returns the number applied; revision conflicts are dropped and their
        trigger bookkeeping reset so the request is re-raised next update.
        """
        applied = 0
        for outcome in sorted((o for o in outcomes if o.chain is not None),
                              key=lambda o: o.agent_id):
            rec = self.db.get(outcome.agent_id)
            chain = outcome.chain
            if chain.revision != rec.chain.revision + 1:
                self._forget_triggers(outcome.agent_id)
                self.report.adaptation_log.append({
                    "clock": self.state.clock, "agent_id": outcome.agent_id,
                    "trigger": outcome.trigger, "revision": chain.revision,
                    "status": "revision-conflict",
                })
                continue
            rec.chain = chain
            rec.adaptation_history.append((self.state.clock, outcome.trigger, chain.revision))
            self.report.adaptation_log.append({
                "clock": self.state.clock, "agent_id": outcome.agent_id,
                "trigger": outcome.trigger, "revision": chain.revision,
                "status": outcome.status,
            })
            self._replan_agent(rec)
            applied += 1
        return applied

    def _forget_triggers(self, agent_id: str) -> None:
        for notified in self.tracker.closure_notified.values():
            notified.discard(agent_id)
        self.tracker.congestion_notified = {
            k for k in self.tracker.congestion_notified if k[0] != agent_id
        }

    def _replan_agent(self, rec: AgentRecord) -> None:
        """Re-derive progression state and routes after a chain change."""
        clock = self.state.clock
        acts = rec.chain.activities
        if rec.en_route:
            veh = rec.vehicle
            cur_edge = veh.route.edges[veh.route_index]
            # next target: first activity still worth reaching
            idx = next((i for i, a in enumerate(acts) if a.end > clock), len(acts) - 1)
            rec.pending_target = idx
            dest = self.world.pois[acts[idx].poi].attached_edge
            try:
                new_route = shortest_route(self.net, cur_edge, dest, clock, self.weights)
            except (NoPathError, MobisimError):
                return  # keep the old route; closure triggers will retry later
            mesosim.swap_route(veh, new_route)
            rec.current_route = new_route
        else:
            idx = len(acts) - 1
            for i, a in enumerate(acts):
                if a.end > clock and not (a.poi == rec.position_poi and a.start <= clock):
                    idx = i
                    break
                if a.poi == rec.position_poi and a.start <= clock < a.end:
                    idx = i + 1
                    break
            rec.pending_target = min(idx, len(acts))
            # old heap entries for this agent go stale via the revision check on pop
            self._schedule_next_departure(rec)

    # ------------------------------------------------------------ env updates

    def _update_closures(self) -> None:
        clock = self.state.clock
        for spec in self.scenario.closures:
            cid = spec.closure_id
            if spec.active_at(clock) and cid not in self._active_closures:
                self._active_closures[cid] = apply_closure(self.net, spec)
            elif not spec.active_at(clock) and cid in self._active_closures:
                expired = self._active_closures.pop(cid)
                still_closed = set()
                for other_edges in self._active_closures.values():
                    still_closed |= other_edges
                reopen_edges(self.net, expired - still_closed)

    def _active_closure_specs(self):
        return [c for c in self.scenario.closures if c.closure_id in self._active_closures]

    def _dispatch_batch(self, requests: list[ModificationRequest]) -> None:
        if not requests:
            return
        closures = self._active_closure_specs()
        # rule backends decide against live congestion and closure state
        fallback = RuleBackend(self.world, self.net, weights=self.weights, closures=closures)
        backend = fallback if isinstance(self.backend, RuleBackend) else self.backend
        synchronous = getattr(backend, "deterministic", False) or pause_for_disruption(
            len(requests), self.config)
        if synchronous:
            result = modify_batch(requests, backend, self.config.pool_size,
                                  self.world, self.net, weights=self.weights,
                                  closures=closures, fallback=fallback)
            job = _BatchJob(result)
            self._pending_jobs.append(job)
            self._collect_finished_jobs()
        else:
            job = _BatchJob()

            def work():
                job.result = modify_batch(requests, backend, self.config.pool_size,
                                          self.world, self.net, weights=self.weights,
                                          closures=closures, fallback=fallback)

            job.thread = threading.Thread(target=work, daemon=True)
            job.thread.start()
            self._pending_jobs.append(job)

    def _collect_finished_jobs(self) -> None:
        remaining = []
        for job in self._pending_jobs:
            if job.done() and job.result is not None:
                self.apply_modifications(job.result.outcomes)
            else:
                remaining.append(job)
        self._pending_jobs = remaining

    def _wait_for_jobs(self) -> None:
        for job in self._pending_jobs:
            if job.thread is not None:
                job.thread.join()
        self._collect_finished_jobs()

    def _env_update(self) -> None:
        self.weights = mesosim.refresh_travel_times(self.state, self.net)
        requests = raise_triggers(
            self.state, self.net, self._active_closure_specs(), self.scenario.events,
            self.config.congestion_threshold, world=self.world, agents_db=self.db,
            tracker=self.tracker, weights=self.weights,
        )
        for hook in self.pre_dispatch_hooks:
            hook(self, requests)
        must_pause = pause_for_disruption(len(requests), self.config)
        self._dispatch_batch(requests)
        if must_pause:
            self._wait_for_jobs()
        self._rescue_blocked_vehicles()
        self._record_metrics()
        for obs in self.observers:
            obs(self)

    def _rescue_blocked_vehicles(self) -> None:
        """Reroute vehicles whose remaining route crosses a closed edge and
        whose modification could not fix it (e.g. the destination itself is
        closed). Unreachable targets are skipped in favor of the next open
        activity; schedules are not rewritten, the skipped trips just never
        happen."""
        closed = self.net.closed_edges()
        if not closed:
            return
        clock = self.state.clock
        for rec in self.db.records():
            if not rec.en_route or rec.vehicle is None:
                continue
            veh = rec.vehicle
            if not (set(veh.route.edges[veh.route_index + 1:]) & closed):
                continue
            if not self._reroute_to_open_target(rec, veh, clock):
                # dead end: every onward edge is barricaded; turn around once
                # and try again from the reverse carriageway
                if mesosim.uturn_vehicle(self.state, self.net, veh) is not None:
                    self._reroute_to_open_target(rec, veh, clock)
            # still nothing reachable: stay queued; the next update retries
            # (and succeeds once the closure expires)

    def _reroute_to_open_target(self, rec: AgentRecord, veh, clock: float) -> bool:
        """Aim the vehicle at its first open, reachable future activity."""
        cur_edge = veh.route.edges[veh.route_index]
        acts = rec.chain.activities
        idx = rec.pending_target
        while idx < len(acts):
            dest = self.world.pois[acts[idx].poi].attached_edge
            if not self.net.edges[dest].closed:
                try:
                    new_route = shortest_route(self.net, cur_edge, dest, clock, self.weights,
                                               allow_closed_origin=True)
                except (NoPathError, MobisimError):
                    pass
                else:
                    mesosim.swap_route(veh, new_route)
                    rec.current_route = new_route
                    rec.pending_target = idx
                    return True
            idx += 1
        return False

    def _record_metrics(self) -> None:
        if self.state.queues:
            idx = [mesosim.congestion_index(self.state, self.net, e) for e in self.state.queues]
            mean_idx = sum(idx) / len(idx)
        else:
            mean_idx = 1.0
        self.report.metrics_rows.append({
            "clock": int(self.state.clock),
            "active_agents": self.state.en_route_count(),
            "mean_congestion_index": f"{mean_idx:.6f}",
            "arrivals": self._arrival_window,
        })
        self._arrival_window = 0

    # ------------------------------------------------------------ commands

    def _process_commands(self) -> None:
        for cmd in self._drain_commands():
            ack = self._execute_command(cmd)
            reply = cmd.get("_reply")
            if reply is not None:
                reply(ack)

    def _execute_command(self, cmd: dict) -> dict:
        request_id = cmd.get("request_id")
        name = cmd.get("command")
        payload = cmd.get("payload") or {}
        ack = {"type": "ack", "request_id": request_id, "ok": True}
        try:
            if name == "close_road":
                region = None
                if payload.get("region"):
                    region = (tuple(payload["region"]["center"]), float(payload["region"]["radius"]))
                self._cmd_counter += 1
                spec_id = payload.get("closure_id") or f"cmd-closure-{self._cmd_counter}"
                from .scenario import ClosureSpec

                spec = ClosureSpec(closure_id=spec_id,
                                   edges=[str(e) for e in payload.get("edges", [])],
                                   region=region, start=self.state.clock)
                for eid in spec.edges:
                    self.net.edge(eid)  # unknown edge -> error ack
                self.scenario.closures.append(spec)
                self._update_closures()
                ack["closure_id"] = spec_id
            elif name == "create_event":
                from .scenario import EventSpec

                self._cmd_counter += 1
                spec = EventSpec(
                    event_id=payload.get("event_id") or f"cmd-event-{self._cmd_counter}",
                    venue=str(payload["venue"]),
                    start=float(payload["start"]),
                    duration=float(payload["duration"]),
                    capacity=int(payload.get("capacity", 100)),
                    base_interest=float(payload.get("base_interest", 1.0)),
                    age_factors=[(int(b["min"]), int(b["max"]), float(b["factor"]))
                                 for b in payload.get("age_factors", [])],
                    gender_factors=payload.get("gender_factors", {}),
                    income_factors={int(k): float(v)
                                    for k, v in payload.get("income_factors", {}).items()},
                    distance_scale_m=float(payload.get("distance_scale_m", 3000.0)),
                    announce=self.state.clock,
                )
                self.world.poi(spec.venue)
                self.scenario.events.append(spec)
                ack["event_id"] = spec.event_id
            elif name == "select_agent":
                ack["agent"] = self.agent_detail(str(payload["agent_id"]))
            elif name == "pause":
                self.paused_by_operator = True
            elif name == "resume":
                self.paused_by_operator = False
            elif name == "set_speed":
                self.config.real_time_factor = float(payload["factor"])
            else:
                raise ValueError(f"unknown command {name!r}")
        except Exception as exc:
            return {"type": "ack", "request_id": request_id, "ok": False, "error": str(exc)}
        return ack

    # ------------------------------------------------------------ snapshots

    def build_snapshot(self) -> dict:
        vehicles = mesosim.vehicle_positions(self.state, self.net)
        if len(vehicles) > 20_000:
            stride = math.ceil(len(vehicles) / 20_000)
            vehicles = vehicles[::stride]
        edge_stats = []
        for eid in self.state.queues:
            edge_stats.append([
                eid,
                round(mesosim.congestion_index(self.state, self.net, eid), 4),
                len(self.state.queues[eid]),
            ])
        return {
            "type": "snapshot",
            "clock": self.state.clock,
            "active_agent_count": self.state.en_route_count(),
            "vehicles": [[aid, round(x, 1), round(y, 1), round(s, 2)] for aid, x, y, s in vehicles],
            "edge_stats": edge_stats,
            "active_closures": self.active_closure_ids(),
            "active_events": self.active_event_ids(),
            "paused": self.paused_by_operator,
        }

    def _emit_snapshot(self) -> None:
        if self.snapshot_sink is not None:
            self.snapshot_sink(self.build_snapshot())

    # ------------------------------------------------------------ main loop

    def run(self) -> RunReport:
        cfg = self.config
        for rec in self.db.records():
            self._schedule_next_departure(rec)
        steps_per_env = round(cfg.env_update_period / cfg.step_length)
        steps_per_snap = max(1, round(cfg.snapshot_period / cfg.step_length))
        steps_per_heat = max(1, round(cfg.heatmap_period / cfg.step_length))
        n_steps = round(cfg.horizon / cfg.step_length)

        self._update_closures()
        self._env_update()
        self._emit_snapshot()
        wall_start = time.perf_counter()

        for step_no in range(1, n_steps + 1):
            self._process_commands()
            while self.paused_by_operator:
                self._emit_snapshot()
                time.sleep(0.05)
                self._process_commands()
            self._collect_finished_jobs()
            self._depart_due_agents()
            mesosim.step(self.state, self.net, cfg.step_length)
            self._update_closures()  # post-step: activations land exactly at spec.start
            self._arrival_window += len(self.state.arrivals_this_step)
            self._handle_arrivals()
            if step_no % steps_per_env == 0:
                self._env_update()
            if step_no % steps_per_snap == 0:
                self._emit_snapshot()
            if step_no % steps_per_heat == 0:
                self.report.heatmaps[int(self.state.clock)] = mesosim.density_heatmap(
                    self.state, self.net, cfg.heatmap_cell_m)
            if cfg.real_time_factor > 0:
                target = wall_start + step_no * cfg.step_length / cfg.real_time_factor
                delay = target - time.perf_counter()
                if delay > 0:
                    time.sleep(delay)

        self._wait_for_jobs()
        for rec in self.db.records():
            if self.state.clock >= rec.chain.activities[-1].end and not rec.en_route:
                rec.status = FINISHED
        self.report.final_chains = {aid: self.db.get(aid).chain for aid in self.db.agent_ids()}
        self.report.summary = {
            "horizon": cfg.horizon,
            "seed": cfg.seed,
            "agents": len(self.db),
            "total_trips": self.total_trips,
            "arrived_total": self.state.arrived_total,
            "dropped_activities": self.dropped_activities,
            "modifications": sum(1 for r in self.report.adaptation_log
                                 if r["status"] in ("accepted", "fallback_accepted")),
            "env_update_period": cfg.env_update_period,
            "step_length": cfg.step_length,
        }
        return self.report


def run(world: World, net: RoadNetwork, db: AgentDatabase, config: RunConfig,
        scenario: Scenario, backend=None, observers=None, snapshot_sink=None,
        runtime_out: list | None = None) -> RunReport:
    """Execute a full simulation; see Runtime for the moving parts.

    `observers` are called back at every environment update with the runtime;
    `runtime_out`, when given, receives the Runtime before stepping starts
    (the gateway uses it to wire commands and snapshots).
    """
    rt = Runtime(world, net, db, config, scenario, backend=backend)
    if observers:
        rt.observers.extend(observers)
    if snapshot_sink is not None:
        rt.snapshot_sink = snapshot_sink
    if runtime_out is not None:
        runtime_out.append(rt)
    return rt.run()
