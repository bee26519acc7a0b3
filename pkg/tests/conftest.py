import numpy as np
import pytest

from oracles import structured_square
from shapeforge.geometry import desk_preset, generate
from shapeforge.mesh import Mesh, RegionMap

ACCEPTANCE_LINES: list[str] = []


def square_mesh(n: int, region_of=None) -> Mesh:
    """Structured unit-square mesh; ``region_of(centroid) -> id`` (default 1)."""
    nodes, tris, edges = structured_square(n)
    cent = nodes[tris].mean(axis=1)
    rids = np.ones(len(tris), int) if region_of is None else np.array([region_of(c) for c in cent])
    iface = []
    tmp = Mesh(nodes, tris, rids, edges, np.ones(len(edges), int))
    for (i, j), ts in tmp.edge_triangles.items():
        if len(ts) == 2 and rids[ts[0]] != rids[ts[1]]:
            iface.append((i, j))
    iface = np.array(iface, int).reshape(-1, 2)
    return Mesh(nodes, tris, rids, edges, np.ones(len(edges), int), iface, np.ones(len(iface), int))


def split_square(n: int = 8):
    """Unit square with a design region in the middle band: iron 10 (x < 0.5), air 11."""
    def region(c):
        if 0.25 < c[1] < 0.75:
            return 10 if c[0] < 0.5 else 11
        return 1
    mesh = square_mesh(n, region)
    regions = RegionMap(iron=frozenset({10}), air=frozenset({1, 11}), coils={}, rotor=frozenset({10, 11}))
    return mesh, regions


@pytest.fixture(scope="session")
def desk():
    return generate(desk_preset())


@pytest.fixture(scope="session")
def desk_spec():
    return desk_preset()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
