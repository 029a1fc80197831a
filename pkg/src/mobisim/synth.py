"""Synthetic world generation: grid road network, POI catalog, population.

Produces files in the exact formats the loaders consume, so tests and demos
can build inputs at any scale without shipping large fixtures. Everything is
seeded and deterministic.
"""

from __future__ import annotations

import json
from pathlib import Path

from .streams import derive_rng
from .worldmodel import ActivityCode

GRID_SPEED_MS = 13.9        # ~50 km/h arterials
GRID_CAPACITY_VPH = 1200.0  # per edge outflow

# POI category mix: (codes served, relative count weight)
_POI_MIX = [
    ((1,), 30),                 # residential
    ((2,), 10),                 # workplaces
    ((3,), 3),                  # schools
    ((5, 6, 7), 10),            # retail clusters
    ((5,), 5),
    ((7,), 8),                  # restaurants
    ((8, 15), 4),
    ((9,), 5),                  # recreation
    ((9, 10), 4),
    ((10,), 3),
    ((11,), 5),
    ((12,), 3),
    ((13,), 2),
    ((4, 14), 3),
]


def synth_network_doc(rows: int, cols: int, spacing_m: float = 500.0) -> dict:
    """Bidirectional grid network document (rows x cols nodes)."""
    nodes = [
        {"id": f"n{r:02d}{c:02d}", "x": c * spacing_m, "y": r * spacing_m}
        for r in range(rows)
        for c in range(cols)
    ]
    edges = []

    def add(r1, c1, r2, c2):
        a, b = f"n{r1:02d}{c1:02d}", f"n{r2:02d}{c2:02d}"
        edges.append({
            "id": f"e{r1:02d}{c1:02d}-{r2:02d}{c2:02d}",
            "from": a, "to": b, "length": spacing_m,
            "free_flow_speed": GRID_SPEED_MS, "lanes": 1, "capacity": GRID_CAPACITY_VPH,
        })

    for r in range(rows):
        for c in range(cols):
            if c + 1 < cols:
                add(r, c, r, c + 1)
                add(r, c + 1, r, c)
            if r + 1 < rows:
                add(r, c, r + 1, c)
                add(r + 1, c, r, c)
    return {"nodes": nodes, "edges": edges}


def synth_poi_records(net_doc: dict, n_pois: int, seed: int,
                      stadium_near: tuple[float, float] | None = None) -> list[dict]:
    """POIs jittered around random edge midpoints; every code 1-15 is covered.

    With stadium_near, also emits a fixed POI "stadium" (code 9) snapped next
    to the edge midpoint closest to that position, for event scenarios.
    """
    rng = derive_rng(seed, "pois")
    node_pos = {n["id"]: (n["x"], n["y"]) for n in net_doc["nodes"]}
    edges = net_doc["edges"]

    mix: list[tuple[tuple[int, ...], int]] = []
    for cats, weight in _POI_MIX:
        mix.extend([cats] * weight)

    records = []
    if stadium_near is not None:
        best = min(
            edges,
            key=lambda e: (node_pos[e["from"]][0] / 2 + node_pos[e["to"]][0] / 2 - stadium_near[0]) ** 2
            + (node_pos[e["from"]][1] / 2 + node_pos[e["to"]][1] / 2 - stadium_near[1]) ** 2,
        )
        (x1, y1), (x2, y2) = node_pos[best["from"]], node_pos[best["to"]]
        records.append({
            "poi_id": "stadium", "name": "City Stadium", "categories": [9],
            "x": round((x1 + x2) / 2.0 + 10.0, 1), "y": round((y1 + y2) / 2.0 + 10.0, 1),
        })
    for i in range(n_pois):
        cats = mix[i % len(mix)] if i < len(_POI_MIX) * 2 else rng.choice(mix)
        e = rng.choice(edges)
        (x1, y1), (x2, y2) = node_pos[e["from"]], node_pos[e["to"]]
        mx, my = (x1 + x2) / 2.0, (y1 + y2) / 2.0
        records.append({
            "poi_id": f"p{i:05d}",
            "name": f"poi-{i:05d}",
            "categories": sorted(set(cats)),
            "x": round(mx + rng.uniform(-40.0, 40.0), 1),
            "y": round(my + rng.uniform(-40.0, 40.0), 1),
        })
    # guarantee coverage of all 15 codes
    covered = {c for rec in records for c in rec["categories"]}
    missing = [c for c in range(1, 16) if c not in covered]
    for j, code in enumerate(missing):
        records[j]["categories"] = sorted(set(records[j]["categories"]) | {code})
    return records


def synth_population_records(n_agents: int, seed: int) -> list[dict]:
    records = []
    genders = ["female", "male"]
    for i in range(n_agents):
        agent_id = f"a{i:06d}"
        rng = derive_rng(seed, "person", agent_id)
        age = rng.randint(16, 90)
        if age >= 65:
            status = "retired"
        elif age <= 22 and rng.random() < 0.7:
            status = "student"
        elif rng.random() < 0.82:
            status = "employed"
        else:
            status = "unemployed"
        records.append({
            "agent_id": agent_id,
            "age": age,
            "gender": genders[rng.random() < 0.495],
            "income_bracket": rng.choices([1, 2, 3, 4, 5], weights=[15, 25, 30, 20, 10])[0],
            "employment_status": status,
            "education_level": rng.randint(1, 5),
            "household_size": rng.choices([1, 2, 3, 4, 5], weights=[28, 34, 16, 15, 7])[0],
            "vehicle_access": rng.random() < 0.92,
        })
    return records


def write_synth_world(
    outdir: str | Path,
    rows: int = 7,
    cols: int = 7,
    spacing_m: float = 800.0,
    n_pois: int = 300,
    n_agents: int = 1000,
    seed: int = 1,
    stadium_near: tuple[float, float] | None = None,
) -> dict[str, Path]:
    """Write network/pois/population files; returns the paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    net_doc = synth_network_doc(rows, cols, spacing_m)
    paths = {
        "network": outdir / "network.json",
        "pois": outdir / "pois.json",
        "population": outdir / "population.json",
    }
    paths["network"].write_text(json.dumps(net_doc, separators=(",", ":")) + "\n")
    paths["pois"].write_text(
        json.dumps(synth_poi_records(net_doc, n_pois, seed, stadium_near=stadium_near),
                   separators=(",", ":")) + "\n")
    paths["population"].write_text(
        json.dumps(synth_population_records(n_agents, seed), separators=(",", ":")) + "\n")
    return paths


def build_synth_world(
    rows: int = 7,
    cols: int = 7,
    spacing_m: float = 800.0,
    n_pois: int = 300,
    n_agents: int = 1000,
    seed: int = 1,
    calibration: dict | None = None,
    stadium_near: tuple[float, float] | None = None,
):
    """In-memory synthetic World (convenience for tests)."""
    import tempfile

    from .chainsynth import default_calibration
    from .netgraph import load_network
    from .worldmodel import build_world, load_pois, load_population

    with tempfile.TemporaryDirectory() as td:
        paths = write_synth_world(td, rows, cols, spacing_m, n_pois, n_agents, seed,
                                  stadium_near=stadium_near)
        net = load_network(paths["network"])
        pois, _ = load_pois(paths["pois"], net)
        profiles = load_population(paths["population"])
    world = build_world(net, pois, profiles,
                        calibration=calibration or default_calibration(),
                        anchor_seed=seed)
    return world
