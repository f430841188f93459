import numpy as np
import pytest

from hho_flow.basis import (FaceBasis, ScalarBasis, eval_coeffs, koszul_spaces,
                            project, scalar_dim)
from hho_flow.errors import QuadratureDeficit
from hho_flow.quadrature import Quadrature, segment_rule, triangle_rule
from hho_flow.reconstruct import OperatorCache

from conftest import rng


def square_basis(degree, lo=0.0, hi=1.0, exactness=14):
    """Orthonormal basis on the square [lo,hi]^2 via two triangles."""
    a, b = lo, hi
    t1 = triangle_rule(exactness, np.array([[a, a], [b, a], [b, b]]))
    t2 = triangle_rule(exactness, np.array([[a, a], [b, b], [a, b]]))
    quad = Quadrature(np.vstack([t1.points, t2.points]),
                      np.concatenate([t1.weights, t2.weights]), exactness)
    center = np.array([(a + b) / 2, (a + b) / 2])
    return ScalarBasis(degree, center, np.sqrt(2.0) * (b - a), quad)


def test_dimensions():
    assert [scalar_dim(l) for l in (-1, 0, 1, 2, 3)] == [0, 1, 3, 6, 10]
    sb = square_basis(2)
    assert sb.dim == 6
    fb = FaceBasis(3, [0, 0], [1, 0], segment_rule(8, [0, 0], [1, 0]))
    assert fb.dim == 4


def test_orthonormality():
    sb = square_basis(3)
    q = sb.quad
    vals = sb.eval(q.points)
    gram = (vals * q.weights[:, None]).T @ vals
    assert np.abs(gram - np.eye(sb.dim)).max() < 1e-10


def test_projection_reproduces_polynomials():
    sb = square_basis(1)
    c = project(lambda p: 3.0 * p[:, 0] + 2.0 * p[:, 1], sb, f_degree=1)
    pts = rng(1).random((7, 2))
    assert eval_coeffs(sb, c, pts) == pytest.approx(3 * pts[:, 0] + 2 * pts[:, 1],
                                                    abs=1e-13)


def test_projection_idempotent():
    sb = square_basis(2)
    r = rng(2)
    for _ in range(20):
        c = r.standard_normal(sb.dim)
        c2 = project(lambda p: eval_coeffs(sb, c, p), sb)
        assert np.abs(c2 - c).max() < 1e-12


def test_segment_projection_hand_value():
    # projection of x^2 onto P^1 of [0,1] is x - 1/6 (normal equations by hand)
    fb = FaceBasis(1, [0.0, 0.0], [1.0, 0.0], segment_rule(8, [0, 0], [1, 0]))
    c = project(lambda p: p[:, 0] ** 2, fb, f_degree=2)
    s = np.linspace(0.0, 1.0, 11)
    pts = np.stack([s, np.zeros_like(s)], axis=1)
    assert fb.eval(pts) @ c == pytest.approx(s - 1.0 / 6.0, abs=1e-13)


def test_projection_error_rate():
    # L2 error of projecting sin(pi x) onto P^1 of shrinking squares is O(h^2)
    errs = []
    hs = []
    for scale in (0.5, 0.25, 0.125):
        sb = square_basis(1, lo=0.0, hi=scale)
        c = project(lambda p: np.sin(np.pi * p[:, 0]), sb)
        q = sb.quad
        diff = np.sin(np.pi * q.points[:, 0]) - sb.eval(q.points) @ c
        errs.append(np.sqrt(q.weights @ diff**2))
        hs.append(scale)
    rate = np.log(errs[0] / errs[-1]) / np.log(hs[0] / hs[-1])
    assert rate > 1.85


def test_quadrature_deficit():
    sb = square_basis(2, exactness=6)
    with pytest.raises(QuadratureDeficit):
        project(lambda p: p[:, 0] ** 8, sb, f_degree=8)


def test_koszul_dimensions_element():
    sb = square_basis(2)
    ks = koszul_spaces(sb, 1, np.array([0.5, 0.5]))
    assert (ks.dim_G, ks.dim_Gc) == (5, 1)
    assert ks.decomposition_rank() == 6
    ks0 = koszul_spaces(sb, 0, np.array([0.5, 0.5]))
    assert (ks0.dim_G, ks0.dim_Gc) == (2, 0)


def test_koszul_dimensions_broken(cart2):
    # fan submesh of a square: 4 triangles; at l = 1 the broken splitting has
    # dim grad P^2 = 4*5 and dim complement = 4*1, total 4 * dim P^1(tau)^2
    ops = OperatorCache(cart2, 1).get(cart2.elements[0])
    dims_g = dims_gc = rank = 0
    for sb in ops.tau_sb:
        ks = koszul_spaces(sb, 1, ops.x_T)
        dims_g += ks.dim_G
        dims_gc += ks.dim_Gc
        rank += ks.decomposition_rank()
    assert dims_g == 20 and dims_gc == 4
    assert rank == 24 == dims_g + dims_gc


def _random_broken(ops, degree, seed):
    r = rng(seed)
    return [r.standard_normal(scalar_dim(degree)) for _ in range(ops.m)]


def _broken_values(ops, coeffs, degree, t, pts):
    return ops.tau_sb[t].eval(pts, dim=scalar_dim(degree)) @ coeffs[t]


def _linf_estimate(ops, coeffs, degree):
    best = 0.0
    for t in range(ops.m):
        pts = np.vstack([ops.vol_q[t].points, ops.submesh.triangles[t].vertices])
        best = max(best, float(np.abs(_broken_values(ops, coeffs, degree, t, pts)).max()))
    return best


def _l2_broken(ops, coeffs, degree, grad=False):
    total = 0.0
    for t in range(ops.m):
        q = ops.vol_q[t]
        if grad:
            g = ops.tau_sb[t].grad(q.points, dim=scalar_dim(degree)) @ coeffs[t]
            total += q.weights @ (g**2).sum(axis=1)
        else:
            v = _broken_values(ops, coeffs, degree, t, q.points)
            total += q.weights @ v**2
    return float(np.sqrt(total))


def _refined_square_ops(scale):
    from hho_flow.mesh import generate_cartesian
    from hho_flow.solver import HHOSystem

    n = int(round(1.0 / scale))
    mesh = generate_cartesian(n)
    return OperatorCache(mesh, 1).get(mesh.elements[0])


@pytest.mark.parametrize("which", ["embedding", "inverse", "trace"])
def test_submesh_inequalities_stable_constants(which):
    # Lebesgue embedding, inverse, and trace inequalities for piecewise
    # polynomials on the fan submesh: the constants stay within a factor of
    # two across two refinements of the same element shape
    consts = []
    for scale in (1.0, 0.5, 0.25):
        ops = _refined_square_ops(scale)
        worst = 0.0
        for seed in range(25):
            coeffs = _random_broken(ops, 2, seed)
            l2 = _l2_broken(ops, coeffs, 2)
            if which == "embedding":
                val = _linf_estimate(ops, coeffs, 2) / (l2 / ops.h_T)
            elif which == "inverse":
                val = _l2_broken(ops, coeffs, 2, grad=True) / (l2 / ops.h_T)
            else:
                fq = ops.face_q[0]
                tr = _broken_values(ops, coeffs, 2, 0, fq.points)
                face_l2 = np.sqrt(fq.weights @ tr**2)
                val = face_l2 / (l2 / np.sqrt(ops.h_F[0]))
            worst = max(worst, val)
        consts.append(worst)
    top, bottom = max(consts), min(consts)
    assert top / bottom < 2.0
