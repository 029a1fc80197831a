"""Command line interface.

Subcommands: synth (make demo input files), generate (population -> chains),
validate (lint input files), run (execute a scenario, optionally serving the
control gateway), replay-report (summarize a run report directory).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import MobisimError


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mobisim",
                                 description="Agent-based mobility simulator")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("synth", help="write a synthetic world (network/POIs/population)")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--rows", type=int, default=7)
    p.add_argument("--cols", type=int, default=7)
    p.add_argument("--spacing", type=float, default=800.0)
    p.add_argument("--pois", type=int, default=300)
    p.add_argument("--agents", type=int, default=1000)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--stadium", action="store_true",
                   help="include a fixed 'stadium' POI for event scenarios")

    p = sub.add_parser("generate", help="generate daily activity chains for a population")
    p.add_argument("--network", required=True, type=Path)
    p.add_argument("--pois", required=True, type=Path)
    p.add_argument("--population", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--horizon", type=float, default=None)
    p.add_argument("--calibration", type=Path, default=None)

    p = sub.add_parser("validate", help="lint network / POI / population / scenario files")
    p.add_argument("--network", required=True, type=Path)
    p.add_argument("--pois", type=Path, default=None)
    p.add_argument("--population", type=Path, default=None)
    p.add_argument("--scenario", type=Path, default=None)
    p.add_argument("--calibration", type=Path, default=None)

    p = sub.add_parser("run", help="run a scenario and write a report directory")
    p.add_argument("--network", required=True, type=Path)
    p.add_argument("--pois", required=True, type=Path)
    p.add_argument("--population", required=True, type=Path)
    p.add_argument("--chains", type=Path, default=None,
                   help="pre-generated chains file (default: generate from --seed)")
    p.add_argument("--scenario", type=Path, default=None)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--config", type=Path, default=None, help="RunConfig overrides (JSON)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--horizon", type=float, default=86400.0)
    p.add_argument("--step", type=float, default=1.0)
    p.add_argument("--env-update", type=float, default=300.0)
    p.add_argument("--pool-size", type=int, default=100)
    p.add_argument("--calibration", type=Path, default=None)
    p.add_argument("--serve", type=int, default=None, metavar="PORT",
                   help="serve the control gateway on PORT while running")
    p.add_argument("--real-time-factor", type=float, default=0.0,
                   help="pace the clock (sim seconds per wall second; 0 = unlimited)")
    p.add_argument("--backend", choices=["rule", "llm", "mock"], default="rule")
    p.add_argument("--llm-endpoint", default=None,
                   help="chat-completion endpoint (default: $MOBISIM_LLM_ENDPOINT)")
    p.add_argument("--llm-model", default="default")
    p.add_argument("--llm-temperature", type=float, default=0.2)
    p.add_argument("--llm-timeout", type=float, default=30.0)
    p.add_argument("--mock-latency", type=float, default=0.0,
                   help="latency of the built-in mock LLM service (--backend mock)")

    p = sub.add_parser("replay-report", help="summarize a run report directory")
    p.add_argument("--report", required=True, type=Path)
    return ap


def _load_world(args, need_calibration=True):
    from .chainsynth import default_calibration, load_calibration
    from .netgraph import load_network
    from .worldmodel import build_world, load_pois, load_population

    net = load_network(args.network)
    pois, rejected = load_pois(args.pois, net)
    if rejected:
        print(f"warning: {len(rejected)} POIs farther than 200 m from any edge were rejected",
              file=sys.stderr)
    profiles = load_population(args.population)
    calibration = None
    if need_calibration:
        calibration = (load_calibration(args.calibration) if args.calibration
                       else default_calibration())
    return build_world(net, pois, profiles, calibration=calibration, anchor_seed=args.seed)


def _cmd_synth(args) -> int:
    from .synth import write_synth_world

    paths = write_synth_world(args.out, rows=args.rows, cols=args.cols,
                              spacing_m=args.spacing, n_pois=args.pois,
                              n_agents=args.agents, seed=args.seed,
                              stadium_near=(args.spacing, args.spacing) if args.stadium else None)
    for kind, path in paths.items():
        print(f"{kind}: {path}")
    return 0


def _cmd_generate(args) -> int:
    from .chainsynth import generate_population_chains, save_chains

    world = _load_world(args)
    chains = generate_population_chains(
        [world.profile(a) for a in sorted(world.population)], world,
        seed=args.seed, horizon=args.horizon)
    save_chains(args.out, chains)
    print(f"wrote {len(chains)} chains to {args.out}")
    return 0


def _cmd_validate(args) -> int:
    from .chainsynth import load_calibration
    from .netgraph import load_network
    from .scenario import load_scenario, validate_scenario
    from .worldmodel import build_world, load_pois, load_population

    net = load_network(args.network)
    print(f"network: {len(net.nodes)} nodes, {len(net.edges)} edges, OK")
    pois = None
    if args.pois:
        pois, rejected = load_pois(args.pois, net)
        print(f"pois: {len(pois)} snapped, {len(rejected)} rejected, OK")
    profiles = None
    if args.population:
        profiles = load_population(args.population)
        print(f"population: {len(profiles)} profiles, OK")
    if args.calibration:
        load_calibration(args.calibration)
        print("calibration: OK")
    if args.scenario:
        scenario = load_scenario(args.scenario)
        if pois is not None and profiles is not None:
            world = build_world(net, pois, profiles)
            validate_scenario(scenario, net, world)
        print(f"scenario: {len(scenario.closures)} closures, {len(scenario.events)} events, OK")
    return 0


def _cmd_run(args) -> int:
    import os

    from .chainsynth import generate_population_chains, load_chains
    from .orchestrator import AgentDatabase, RunConfig, Runtime
    from .scenario import Scenario, load_scenario

    world = _load_world(args)
    if args.chains:
        chains = load_chains(args.chains)
        missing = [a for a in chains if a not in world.population]
        if missing:
            print(f"error: chains reference unknown agents, e.g. {missing[0]!r}", file=sys.stderr)
            return 2
    else:
        chains = generate_population_chains(
            [world.profile(a) for a in sorted(world.population)], world,
            seed=args.seed, horizon=args.horizon)
    db = AgentDatabase.from_world(world, chains)
    scenario = load_scenario(args.scenario) if args.scenario else Scenario()

    config = RunConfig(step_length=args.step, env_update_period=args.env_update,
                       horizon=args.horizon, seed=args.seed, pool_size=args.pool_size,
                       real_time_factor=args.real_time_factor)
    if args.config:
        overrides = json.loads(Path(args.config).read_text())
        for key, value in overrides.items():
            if not hasattr(config, key):
                print(f"error: unknown RunConfig field {key!r}", file=sys.stderr)
                return 2
            setattr(config, key, value)

    mock = None
    backend = None
    if args.backend == "llm":
        from .adaptor import LLMBackend

        endpoint = args.llm_endpoint or os.environ.get("MOBISIM_LLM_ENDPOINT")
        if not endpoint:
            print("error: --backend llm needs --llm-endpoint or $MOBISIM_LLM_ENDPOINT",
                  file=sys.stderr)
            return 2
        backend = LLMBackend(endpoint=endpoint, model=args.llm_model,
                             temperature=args.llm_temperature, timeout_s=args.llm_timeout,
                             api_key=os.environ.get("MOBISIM_LLM_API_KEY"))
    elif args.backend == "mock":
        from .adaptor import LLMBackend
        from .mockllm import MockLLMService

        mock = MockLLMService(latency_s=args.mock_latency).start()
        backend = LLMBackend(endpoint=mock.endpoint, model="mock")

    runtime = Runtime(world, world.net, db, config, scenario, backend=backend)
    server = None
    try:
        if args.serve is not None:
            from .gateway import GatewayServer

            server = GatewayServer(runtime, port=args.serve).start()
            print(f"gateway listening on {server.host}:{server.port}", flush=True)
        report = runtime.run()
    finally:
        if server is not None:
            server.stop()
        if mock is not None:
            mock.stop()
    outdir = report.write(args.out)
    print(f"report written to {outdir}")
    print(json.dumps(report.summary, sort_keys=True))
    return 0


def _cmd_replay_report(args) -> int:
    report_dir = Path(args.report)
    summary_path = report_dir / "summary.json"
    if not summary_path.exists():
        print(f"error: {summary_path} not found", file=sys.stderr)
        return 2
    summary = json.loads(summary_path.read_text())
    print("run summary")
    for key in sorted(summary):
        print(f"  {key}: {summary[key]}")
    metrics = (report_dir / "metrics.csv").read_text().strip().splitlines()
    header, rows = metrics[0].split(","), [r.split(",") for r in metrics[1:]]
    if rows:
        active = [int(r[header.index("active_agents")]) for r in rows]
        arrivals = sum(int(r[header.index("arrivals")]) for r in rows)
        print(f"  env_updates: {len(rows)}")
        print(f"  peak_active_agents: {max(active)}")
        print(f"  total_arrivals: {arrivals}")
    log = report_dir / "adaptation_log.jsonl"
    if log.exists():
        by_status: dict[str, int] = {}
        with log.open() as fh:
            for line in fh:
                status = json.loads(line)["status"]
                by_status[status] = by_status.get(status, 0) + 1
        for status in sorted(by_status):
            print(f"  adaptations[{status}]: {by_status[status]}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "generate": _cmd_generate,
    "validate": _cmd_validate,
    "run": _cmd_run,
    "replay-report": _cmd_replay_report,
}


def cli_main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.cmd](args)
    except MobisimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
