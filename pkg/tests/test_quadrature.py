import math

import numpy as np
import pytest

from hho_flow.errors import UnsupportedDegree
from hho_flow.quadrature import quadrature_for, segment_rule, triangle_rule

UNIT_TRI = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def unit_tri_monomial(i, j):
    # int_T x^i y^j over the unit triangle
    return math.factorial(i) * math.factorial(j) / math.factorial(i + j + 2)


@pytest.mark.parametrize("degree", [0, 1, 2, 3, 5, 8, 13, 20])
def test_triangle_exactness(degree):
    q = triangle_rule(degree, UNIT_TRI)
    assert np.all(q.weights > 0)
    for i in range(degree + 1):
        for j in range(degree + 1 - i):
            got = q.integrate(q.points[:, 0] ** i * q.points[:, 1] ** j)
            assert got == pytest.approx(unit_tri_monomial(i, j), rel=1e-13)


def test_triangle_xy_degree2():
    q = triangle_rule(2, UNIT_TRI)
    assert q.integrate(q.points[:, 0] * q.points[:, 1]) == pytest.approx(
        1.0 / 24.0, abs=1e-15)


def test_degree_zero_single_point():
    tri = np.array([[0.2, 0.1], [0.9, 0.3], [0.4, 1.1]])
    q = triangle_rule(0, tri)
    area = 0.5 * abs((0.9 - 0.2) * (1.1 - 0.1) - (0.3 - 0.1) * (0.4 - 0.2))
    assert len(q.weights) == 1
    assert q.weights[0] == pytest.approx(area, rel=1e-14)


def test_segment_degree9():
    q = segment_rule(9, [0.0, 0.0], [1.0, 0.0])
    assert q.integrate(q.points[:, 0] ** 9) == pytest.approx(0.1, abs=1e-15)


def test_mapped_triangle():
    tri = np.array([[1.0, 2.0], [3.0, 2.5], [1.5, 4.0]])
    q = triangle_rule(4, tri)
    area = 0.5 * abs((3.0 - 1.0) * (4.0 - 2.0) - (2.5 - 2.0) * (1.5 - 1.0))
    assert q.weights.sum() == pytest.approx(area, rel=1e-14)


def test_quadrature_for_dispatch():
    assert quadrature_for(3, UNIT_TRI).points.shape[1] == 2
    seg = quadrature_for(3, np.array([[0.0, 0.0], [0.0, 2.0]]))
    assert seg.weights.sum() == pytest.approx(2.0, rel=1e-14)
    with pytest.raises(ValueError):
        quadrature_for(1, np.zeros((4, 2)))


def test_unsupported_degree():
    with pytest.raises(UnsupportedDegree):
        triangle_rule(61, UNIT_TRI)
    with pytest.raises(UnsupportedDegree):
        segment_rule(-1, [0, 0], [1, 0])
