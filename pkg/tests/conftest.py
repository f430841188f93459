import numpy as np
import pytest

from hho_flow import mesh as meshmod
from hho_flow.reconstruct import OperatorCache
from hho_flow.solver import HHOSystem

# 5-cell polygonal mesh of the unit square (central square plus 4 trapezoids),
# stand-in for file-ingested Voronoi-type meshes
VORONOI_LIKE = """\
# polygonal sample mesh
8 5 12
0.0 0.0
1.0 0.0
1.0 1.0
0.0 1.0
0.3 0.3
0.7 0.3
0.7 0.7
0.3 0.7
4 4 5 6 7
4 0 1 5 4
4 1 2 6 5
4 2 3 7 6
4 3 0 4 7
"""


@pytest.fixture(scope="session")
def voronoi_like_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("meshes") / "poly5.txt"
    path.write_text(VORONOI_LIKE, encoding="utf-8")
    return path


@pytest.fixture(scope="session")
def cart2():
    return meshmod.generate_cartesian(2)


@pytest.fixture(scope="session")
def hex1():
    return meshmod.generate_hexagonal(1)


@pytest.fixture(scope="session")
def sys_cart2(cart2):
    return HHOSystem(cart2, 1)


@pytest.fixture(scope="session")
def sys_cart4():
    return HHOSystem(meshmod.generate_cartesian(4), 1)


@pytest.fixture(scope="session")
def sys_hex1(hex1):
    return HHOSystem(hex1, 1)


def distinct_ops(mesh, k):
    """One ElementOperators instance per congruence class of a mesh."""
    cache = OperatorCache(mesh, k)
    seen = {}
    for e in mesh.elements:
        ops = cache.get(e)
        seen[id(ops)] = ops
    return list(seen.values())


@pytest.fixture(scope="session")
def element_zoo(cart2, hex1):
    """Mixed Cartesian/hexagonal element operators at k = 1."""
    zoo = distinct_ops(cart2, 1) + distinct_ops(hex1, 1)
    assert len(zoo) >= 6
    return zoo


@pytest.fixture(scope="session")
def element_zoo_k2(cart2):
    return distinct_ops(cart2, 2)


def rng(seed=0):
    return np.random.default_rng(seed)
