"""Orthonormal polynomial bases, L2 projectors, and Koszul-decomposition spaces.

Bases are scaled monomials ((x - center)/h)^alpha, orthonormalized per domain
through a Cholesky factorization of the Gram matrix; integration always happens
with the quadrature rule attached to the domain.
"""

import numpy as np
from scipy.linalg import cholesky, solve_triangular, LinAlgError

from .errors import QuadratureDeficit, SingularGram


def scalar_dim(degree):
    """Dimension of P^degree on a 2D domain (0 for negative degree)."""
    if degree < 0:
        return 0
    return (degree + 1) * (degree + 2) // 2


def monomial_exponents(degree):
    """Graded-lexicographic exponent pairs for 2D monomials of total degree <= degree."""
    return [(d - j, j) for d in range(degree + 1) for j in range(d + 1)]


def _mono_eval_2d(exps, xi):
    out = np.empty((xi.shape[0], len(exps)))
    for c, (ax, ay) in enumerate(exps):
        out[:, c] = xi[:, 0] ** ax * xi[:, 1] ** ay
    return out


def _mono_grad_2d(exps, xi):
    out = np.zeros((xi.shape[0], 2, len(exps)))
    for c, (ax, ay) in enumerate(exps):
        if ax > 0:
            out[:, 0, c] = ax * xi[:, 0] ** (ax - 1) * xi[:, 1] ** ay
        if ay > 0:
            out[:, 1, c] = ay * xi[:, 0] ** ax * xi[:, 1] ** (ay - 1)
    return out


def _mono_lapl_2d(exps, xi):
    out = np.zeros((xi.shape[0], len(exps)))
    for c, (ax, ay) in enumerate(exps):
        if ax > 1:
            out[:, c] += ax * (ax - 1) * xi[:, 0] ** (ax - 2) * xi[:, 1] ** ay
        if ay > 1:
            out[:, c] += ay * (ay - 1) * xi[:, 0] ** ax * xi[:, 1] ** (ay - 2)
    return out


def _orthonormalize(mono_vals, weights):
    gram = (mono_vals * weights[:, None]).T @ mono_vals
    try:
        ell = cholesky(gram, lower=True)
    except LinAlgError as exc:
        raise SingularGram(f"basis Gram matrix not SPD: {exc}") from exc
    if np.min(np.diag(ell)) < 1e-14 * max(1.0, np.max(np.diag(ell))):
        raise SingularGram("basis Gram matrix numerically singular")
    # rows of W give the orthonormal functions in terms of monomials
    return solve_triangular(ell, np.eye(gram.shape[0]), lower=True)


class ScalarBasis:
    """L2-orthonormal basis of P^degree on a 2D region.

    The attached quadrature must cover the region (for polygonal elements it
    is the union of the simplex rules of the submesh) and be exact at least on
    P^(2*degree). Truncating to the leading ``scalar_dim(l)`` functions yields
    the orthonormal basis of P^l for any l <= degree.
    """

    def __init__(self, degree, center, h, quad):
        self.degree = degree
        self.center = np.asarray(center, dtype=float)
        self.h = float(h)
        self.quad = quad
        if quad.exactness_degree < 2 * degree:
            raise QuadratureDeficit(
                f"need exactness {2 * degree} to orthonormalize degree {degree}, "
                f"rule has {quad.exactness_degree}"
            )
        self.exponents = monomial_exponents(degree)
        self.dim = len(self.exponents)
        self._W = _orthonormalize(
            _mono_eval_2d(self.exponents, self._local(quad.points)), quad.weights
        )

    def _local(self, pts):
        return (np.asarray(pts, dtype=float) - self.center) / self.h

    def eval(self, pts, dim=None):
        vals = _mono_eval_2d(self.exponents, self._local(pts)) @ self._W.T
        return vals if dim is None else vals[:, :dim]

    def grad(self, pts, dim=None):
        g = _mono_grad_2d(self.exponents, self._local(pts)) @ self._W.T / self.h
        return g if dim is None else g[:, :, :dim]

    def laplacian(self, pts, dim=None):
        v = _mono_lapl_2d(self.exponents, self._local(pts)) @ self._W.T / self.h**2
        return v if dim is None else v[:, :dim]

    def const_coeff(self):
        """Coefficient vector of the constant function 1."""
        c = np.zeros(self.dim)
        c[0] = 1.0 / self._W[0, 0]
        return c


class FaceBasis:
    """L2-orthonormal 1D basis of P^degree on a segment, evaluated at 2D points."""

    def __init__(self, degree, a, b, quad):
        self.degree = degree
        self.a = np.asarray(a, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.midpoint = 0.5 * (self.a + self.b)
        self.length = float(np.linalg.norm(self.b - self.a))
        self.tangent = (self.b - self.a) / self.length
        self.quad = quad
        self.dim = degree + 1
        mono = self._mono(quad.points)
        self._W = _orthonormalize(mono, quad.weights)

    def _param(self, pts):
        return (np.asarray(pts, dtype=float) - self.midpoint) @ self.tangent / (
            0.5 * self.length
        )

    def _mono(self, pts):
        s = self._param(pts)
        return np.vander(s, self.dim, increasing=True)

    def eval(self, pts, dim=None):
        vals = self._mono(pts) @ self._W.T
        return vals if dim is None else vals[:, :dim]


def project(f, space, f_degree=None):
    """Coefficients of the L2-orthogonal projection of ``f`` onto ``space``.

    ``f`` maps an (n, 2) array of points to scalar values (n,) or vector
    values (n, 2); vector data is projected componentwise and the returned
    coefficients are component-blocked. If ``f_degree`` declares f to be a
    polynomial, the rule attached to the space must integrate products
    f * basis exactly.

    Parameters
    ----------
    f : callable
        Integrand, evaluated at the quadrature points of the space.
    space : ScalarBasis or FaceBasis
        Target space, carrying its quadrature.
    f_degree : int, optional
        Declared polynomial degree of f.
    """
    quad = space.quad
    if f_degree is not None and quad.exactness_degree < f_degree + space.degree:
        raise QuadratureDeficit(
            f"projection of a degree-{f_degree} polynomial onto degree {space.degree} "
            f"needs exactness {f_degree + space.degree}, rule has {quad.exactness_degree}"
        )
    vals = np.asarray(f(quad.points), dtype=float)
    basis_vals = space.eval(quad.points)
    if vals.ndim == 1:
        return (quad.weights * vals) @ basis_vals
    return np.concatenate(
        [(quad.weights * vals[:, c]) @ basis_vals for c in range(vals.shape[1])]
    )


def eval_coeffs(space, coeffs, pts):
    """Evaluate a (possibly vector, component-blocked) coefficient vector."""
    vals = space.eval(pts)
    n = space.dim
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape[-1] == n:
        return vals @ coeffs
    if coeffs.shape[-1] == 2 * n:
        return np.stack([vals @ coeffs[..., :n], vals @ coeffs[..., n:]], axis=-1)
    raise ValueError("coefficient length matches neither scalar nor vector rank")


class KoszulSpaces:
    """Gradient/complement splitting of vector polynomials on one 2D domain.

    Holds coefficient matrices (in the ambient orthonormal basis of P^l(X)^2)
    of a basis of G^l = grad P^(l+1) and of G^{c,l} = (x - pole)^perp P^(l-1),
    together with the L2-orthogonal projector matrices onto each.
    """

    def __init__(self, space, l, pole):
        if space.degree < l + 1:
            raise ValueError("need a basis of degree at least l+1")
        self.l = l
        self.space = space
        self.pole = np.asarray(pole, dtype=float)
        nl = scalar_dim(l)
        self.ambient_dim = 2 * nl
        quad = space.quad
        pts, w = quad.points, quad.weights
        amb = space.eval(pts, dim=nl)

        def to_ambient(vecvals):
            return np.concatenate(
                [(w * vecvals[:, 0]) @ amb, (w * vecvals[:, 1]) @ amb]
            )

        if l >= 0:
            g = space.grad(pts, dim=scalar_dim(l + 1))[:, :, 1:]
            self.G = np.empty((2 * nl, g.shape[2]))
            for j in range(g.shape[2]):
                self.G[:, j] = to_ambient(g[:, :, j])
        else:
            self.G = np.zeros((0, 0))
        ngc = scalar_dim(l - 1)
        self.Gc = np.empty((2 * nl, ngc))
        if ngc:
            rel = pts - self.pole
            sc = space.eval(pts, dim=ngc)
            for j in range(ngc):
                vec = np.stack([-rel[:, 1] * sc[:, j], rel[:, 0] * sc[:, j]], axis=1)
                self.Gc[:, j] = to_ambient(vec)
        self.projG = _projector(self.G, self.ambient_dim)
        self.projGc = _projector(self.Gc, self.ambient_dim)

    @property
    def dim_G(self):
        return self.G.shape[1]

    @property
    def dim_Gc(self):
        return self.Gc.shape[1]

    def decomposition_rank(self):
        both = np.hstack([self.G, self.Gc])
        if both.shape[1] == 0:
            return 0
        return int(np.linalg.matrix_rank(both, tol=1e-10))


def _projector(cols, n):
    if cols.shape[1] == 0:
        return np.zeros((n, n))
    gram = cols.T @ cols
    return cols @ np.linalg.solve(gram, cols.T)


def koszul_spaces(space, l, pole):
    """Koszul splitting P^l(X)^2 = G^l + G^{c,l} on a single domain.

    The direct-sum identity is validated through a rank check; the dimension
    count dim G + dim Gc = 2 * dim P^l holds for every l >= 0.
    """
    ks = KoszulSpaces(space, l, pole)
    expected = 2 * scalar_dim(l)
    if ks.dim_G + ks.dim_Gc != expected or ks.decomposition_rank() != expected:
        raise SingularGram(
            f"Koszul decomposition defective at degree {l}: "
            f"{ks.dim_G}+{ks.dim_Gc} vs {expected}, rank {ks.decomposition_rank()}"
        )
    return ks
