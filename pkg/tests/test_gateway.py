import json
import threading
import time

import pytest

from mobisim.chainsynth import default_calibration, generate_population_chains
from mobisim.gateway import GatewayServer
from mobisim.netgraph import load_network
from mobisim.orchestrator import AgentDatabase, RunConfig, Runtime
from mobisim.scenario import Scenario
from mobisim.synth import build_synth_world
from mobisim.worldmodel import build_world, load_pois, load_population

from helpers import NdjsonClient, WsClient


@pytest.fixture()
def idle_runtime(fixtures_dir):
    """Runtime that is not stepping; tests pump its command queue directly."""
    net = load_network(fixtures_dir / "triangle_bidir_net.json")
    pois, _ = load_pois(fixtures_dir / "pois_small.json", net)
    profiles = load_population(fixtures_dir / "population_small.json")
    world = build_world(net, pois, profiles, calibration=default_calibration(), anchor_seed=11)
    chains = generate_population_chains(profiles, world, seed=42)
    db = AgentDatabase.from_world(world, chains)
    return Runtime(world, net, db, RunConfig(horizon=600.0), Scenario())


def _pump_until(client, runtime, predicate, timeout=5.0):
    """Drain runtime commands while waiting for a matching message."""
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        runtime._process_commands()
        try:
            return client.recv_until(predicate, timeout=0.2)
        except TimeoutError:
            continue
    raise TimeoutError("no matching message before deadline")


def test_command_ack_round_trip_and_malformed_handling(idle_runtime):
    with GatewayServer(idle_runtime) as server:
        client = NdjsonClient(server.host, server.port)

        client.send({"command": "pause", "request_id": "r1"})
        ack = _pump_until(client, idle_runtime, lambda d: d.get("request_id") == "r1")
        assert ack == {"type": "ack", "request_id": "r1", "ok": True}
        assert idle_runtime.paused_by_operator

        # malformed line: error ack, connection survives
        client.sock.sendall(b"this is not json\n")
        err = client.recv_until(lambda d: d.get("ok") is False)
        assert "malformed" in err["error"]

        client.send({"command": "resume", "request_id": "r2"})
        ack = _pump_until(client, idle_runtime, lambda d: d.get("request_id") == "r2")
        assert ack["ok"] is True
        assert not idle_runtime.paused_by_operator
        client.close()


def test_close_road_unknown_edge_error_ack(idle_runtime):
    with GatewayServer(idle_runtime) as server:
        client = NdjsonClient(server.host, server.port)
        client.send({"command": "close_road", "payload": {"edges": ["nope"]}, "request_id": "x"})
        ack = _pump_until(client, idle_runtime, lambda d: d.get("request_id") == "x")
        assert ack["ok"] is False
        assert "nope" in ack["error"]
        client.close()


def test_select_agent_returns_detail(idle_runtime):
    with GatewayServer(idle_runtime) as server:
        client = NdjsonClient(server.host, server.port)
        client.send({"command": "select_agent", "payload": {"agent_id": "1"}, "request_id": "s"})
        ack = _pump_until(client, idle_runtime, lambda d: d.get("request_id") == "s")
        assert ack["ok"] is True
        agent = ack["agent"]
        assert agent["agent_id"] == "1"
        assert agent["chain"]["revision"] >= 0
        assert agent["profile"]["employment_status"] == "employed"
        assert agent["adaptation_history"] == []

        client.send({"command": "select_agent", "payload": {"agent_id": "zz"}, "request_id": "s2"})
        ack = _pump_until(client, idle_runtime, lambda d: d.get("request_id") == "s2")
        assert ack["ok"] is False
        client.close()


def test_get_network_document(idle_runtime):
    with GatewayServer(idle_runtime) as server:
        client = NdjsonClient(server.host, server.port)
        client.send({"command": "get_network", "request_id": "n"})
        doc = client.recv_until(lambda d: d.get("type") == "network")
        assert doc["request_id"] == "n"
        assert {n["id"] for n in doc["nodes"]} == {"A", "B", "C"}
        assert len(doc["edges"]) == 6
        assert any(p["poi_id"] == "h1" for p in doc["pois"])
        client.close()


def test_snapshot_broadcast_and_monotone_clock(idle_runtime):
    with GatewayServer(idle_runtime) as server:
        client = NdjsonClient(server.host, server.port)
        time.sleep(0.5)  # outlast the transport sniff so the client registers
        for _ in range(3):
            idle_runtime.state.clock += 1.0
            server.broadcast(idle_runtime.build_snapshot())
        clocks = []
        for _ in range(3):
            snap = client.recv_until(lambda d: d.get("type") == "snapshot")
            clocks.append(snap["clock"])
        assert clocks == sorted(clocks)
        assert snap["active_agent_count"] == 0
        assert snap["paused"] is False
        client.close()


def test_websocket_transport_speaks_same_protocol(idle_runtime):
    with GatewayServer(idle_runtime) as server:
        ws = WsClient(server.host, server.port)
        ws.send({"command": "get_network", "request_id": "w1"})
        doc = ws.recv()
        assert doc["type"] == "network" and doc["request_id"] == "w1"

        ws.send({"command": "pause", "request_id": "w2"})
        deadline = time.monotonic() + 5.0
        ack = None
        while time.monotonic() < deadline:
            idle_runtime._process_commands()
            if idle_runtime.paused_by_operator:
                ack = ws.recv()
                break
            time.sleep(0.02)
        assert ack == {"type": "ack", "request_id": "w2", "ok": True}
        ws.close()


def test_http_network_json_fetch(idle_runtime):
    import urllib.request

    with GatewayServer(idle_runtime) as server:
        with urllib.request.urlopen(f"http://{server.host}:{server.port}/network.json") as resp:
            doc = json.loads(resp.read())
        assert doc["type"] == "network"
        assert len(doc["edges"]) == 6


def test_scripted_session_golden_acks(idle_runtime, fixtures_dir):
    """Protocol goldens: a scripted command sequence must replay to the exact
    same response bytes (network doc excluded: it is covered above)."""
    script = [
        {"command": "pause", "request_id": "g1"},
        {"command": "close_road", "payload": {"edges": ["AB"]}, "request_id": "g2"},
        {"command": "set_speed", "payload": {"factor": 10.0}, "request_id": "g3"},
        {"command": "bogus", "request_id": "g4"},
        {"command": "resume", "request_id": "g5"},
    ]
    with GatewayServer(idle_runtime) as server:
        client = NdjsonClient(server.host, server.port)
        lines = []
        for cmd in script:
            client.send(cmd)
            ack = _pump_until(client, idle_runtime,
                              lambda d: d.get("request_id") == cmd["request_id"])
            lines.append(json.dumps(ack, sort_keys=True))
        client.close()
    golden_path = fixtures_dir.parent / "golden" / "gateway_session_acks.jsonl"
    assert "\n".join(lines) + "\n" == golden_path.read_text()


def test_live_run_snapshot_closure_cycle():
    """End-to-end: connect mid-run, close a road, observe it in snapshots and
    verify post-closure routing avoids it."""
    world = build_synth_world(n_agents=80, seed=17, stadium_near=(800.0, 800.0))
    chains = generate_population_chains(
        [world.profile(a) for a in sorted(world.population)], world, seed=4)
    db = AgentDatabase.from_world(world, chains)
    config = RunConfig(horizon=40_000.0, env_update_period=300.0, snapshot_period=60.0,
                       real_time_factor=20_000.0)
    runtime = Runtime(world, world.net, db, config, Scenario())
    target_edge = sorted(world.net.edges)[5]

    report_box = []
    with GatewayServer(runtime) as server:
        thread = threading.Thread(target=lambda: report_box.append(runtime.run()), daemon=True)
        thread.start()
        client = NdjsonClient(server.host, server.port)
        snap = client.recv_until(lambda d: d.get("type") == "snapshot", timeout=10.0)
        assert snap["clock"] >= 0.0

        client.send({"command": "close_road", "payload": {"edges": [target_edge]},
                     "request_id": "c1"})
        ack = client.recv_until(lambda d: d.get("request_id") == "c1", timeout=10.0)
        assert ack["ok"] is True
        closure_id = ack["closure_id"]

        snap = client.recv_until(
            lambda d: d.get("type") == "snapshot" and closure_id in d.get("active_closures", []),
            timeout=10.0)
        assert world.net.edges[target_edge].closed
        client.close()
        thread.join(timeout=30.0)
    assert report_box, "run did not finish"
    # nobody still plans to traverse the closed edge (the current edge may be
    # the closed one: vehicles already on it drain normally)
    for rec in db.records():
        if rec.current_route is not None and rec.vehicle is not None:
            upcoming = rec.current_route.edges[rec.vehicle.route_index + 1:]
            assert target_edge not in upcoming
