import sys
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"

# allow `import oracles` / `import helpers` from test modules
sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture()
def triangle_net():
    from mobisim.netgraph import load_network

    return load_network(FIXTURES / "triangle_net.json")


@pytest.fixture()
def triangle_bidir():
    from mobisim.netgraph import load_network

    return load_network(FIXTURES / "triangle_bidir_net.json")
