"""Gauss quadrature on segments and triangles with prescribed polynomial exactness."""

import numpy as np
from numpy.polynomial.legendre import leggauss

from .errors import UnsupportedDegree

MAX_EXACTNESS = 60


class Quadrature:
    """Positive-weight rule exact on polynomials up to ``exactness_degree``.

    ``points`` is an (n, 2) array of physical coordinates and ``weights`` an
    (n,) array summing to the measure of the domain.
    """

    __slots__ = ("points", "weights", "exactness_degree")

    def __init__(self, points, weights, exactness_degree):
        self.points = np.asarray(points, dtype=float)
        self.weights = np.asarray(weights, dtype=float)
        self.exactness_degree = exactness_degree

    def integrate(self, values):
        return np.tensordot(self.weights, values, axes=(0, 0))


def _check_degree(degree):
    if degree < 0 or degree > MAX_EXACTNESS:
        raise UnsupportedDegree(
            f"quadrature exactness {degree} outside supported range [0, {MAX_EXACTNESS}]"
        )


def segment_rule(degree, a, b):
    """Gauss-Legendre rule on the segment [a, b] (2D endpoints), exact on P^degree."""
    _check_degree(degree)
    n = degree // 2 + 1
    x, w = leggauss(n)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    t = 0.5 * (x + 1.0)
    pts = a[None, :] + t[:, None] * (b - a)[None, :]
    length = float(np.linalg.norm(b - a))
    return Quadrature(pts, 0.5 * length * w, degree)


def triangle_rule(degree, tri):
    """Duffy-mapped tensor Gauss rule on a triangle, exact on P^degree.

    The collapsed square map keeps all weights positive and extends to any
    exactness, at the price of slightly more points than symmetric rules.
    """
    _check_degree(degree)
    tri = np.asarray(tri, dtype=float)
    # the collapsed-coordinate integrand gains one degree from the Jacobian
    n = (degree + 3) // 2
    x, w = leggauss(n)
    ga = 0.5 * (x + 1.0)
    wa = 0.5 * w
    # unit-triangle coordinates (u, v) with u in [0,1], v in [0, 1-u]
    u = np.repeat(ga, n)
    s = np.tile(ga, n)
    v = s * (1.0 - u)
    ww = np.repeat(wa, n) * np.tile(wa, n) * (1.0 - u)
    v0, v1, v2 = tri
    pts = v0[None, :] + np.outer(u, v1 - v0) + np.outer(v, v2 - v0)
    area2 = abs((v1[0] - v0[0]) * (v2[1] - v0[1]) - (v1[1] - v0[1]) * (v2[0] - v0[0]))
    return Quadrature(pts, ww * area2, degree)


def quadrature_for(degree, domain):
    """Rule exact on P^degree on a simplex or segment.

    ``domain`` is a (3, 2) array (triangle vertices) or a (2, 2) array
    (segment endpoints).
    """
    domain = np.asarray(domain, dtype=float)
    if domain.shape == (3, 2):
        return triangle_rule(degree, domain)
    if domain.shape == (2, 2):
        return segment_rule(degree, domain[0], domain[1])
    raise ValueError(f"domain shape {domain.shape} is neither a triangle nor a segment")
