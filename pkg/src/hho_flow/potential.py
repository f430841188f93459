"""Scalar potential operator on broken vector polynomials over a fan submesh.

The splitting P^l(tau)^2 = grad P^(l+1)(tau) + (x - x_T)^perp P^(l-1)(tau)
holds simplex by simplex with the shared pole x_T, so every operator here is
block-diagonal over the triangles of the submesh: recovery operators
Gamma = (Id - pi pi)^(-1), the potential whose gradient is the recovered
gradient part, and trace jumps across interior simplicial faces.
"""

from dataclasses import dataclass

import numpy as np

from .basis import FaceBasis, ScalarBasis, koszul_spaces, scalar_dim
from .errors import ContractionFailure, NotInteriorFace
from .quadrature import segment_rule

CONTRACTION_MARGIN = 1e-8


@dataclass
class PiecewisePoly:
    """Broken polynomial on one element's submesh: per-simplex coefficients.

    ``coeffs[t]`` holds the coefficients of the restriction to triangle t in
    that triangle's orthonormal basis of degree ``degree`` (component-blocked
    for vector rank, length 2 * dim).
    """

    degree: int
    rank: str  # "scalar" | "vector"
    coeffs: np.ndarray  # (n_triangles, dim) or (n_triangles, 2*dim)
    bases: tuple  # per-simplex ScalarBasis, degree >= degree

    def eval(self, t, pts):
        n = scalar_dim(self.degree)
        vals = self.bases[t].eval(pts, dim=n)
        if self.rank == "scalar":
            return vals @ self.coeffs[t]
        c = self.coeffs[t]
        return np.stack([vals @ c[:n], vals @ c[n:]], axis=-1)

    def l2_norm_sq(self):
        return float(np.sum(self.coeffs**2))


@dataclass
class GammaOperators:
    """Per-simplex recovery matrices on P^l(submesh)^2 (ambient orthonormal coords)."""

    l: int
    projG: tuple  # per-simplex projector onto grad P^(l+1)
    projGc: tuple  # per-simplex projector onto (x - x_T)^perp P^(l-1)
    gammaG: tuple  # (Id - projG projGc)^(-1)
    gammaGc: tuple  # (Id - projGc projG)^(-1)
    contraction: float  # max over simplices of ||projG projGc||_2

    def apply(self, mats, poly):
        out = np.stack([mats[t] @ poly.coeffs[t] for t in range(len(mats))])
        return PiecewisePoly(poly.degree, poly.rank, out, poly.bases)

    def recover(self, b, c):
        """Recovery operator: Rec(b, c) = GammaG(b - piG c) + GammaGc(c - piGc b)."""
        out = []
        for t in range(len(self.gammaG)):
            bb, cc = b.coeffs[t], c.coeffs[t]
            out.append(
                self.gammaG[t] @ (bb - self.projG[t] @ cc)
                + self.gammaGc[t] @ (cc - self.projGc[t] @ bb)
            )
        return PiecewisePoly(b.degree, "vector", np.stack(out), b.bases)


class PotentialOperator:
    """The potential rho^(l+1) on vector P^l fields over one submesh.

    Built from the per-simplex orthonormal bases (degree >= l+1) sharing the
    quadratures of the submesh triangles; x_T is the common vertex used both
    as Koszul pole and as normalization point of the potential.
    """

    def __init__(self, submesh, tau_bases, l, x_T, sigma_exactness=None):
        self.submesh = submesh
        self.l = l
        self.x_T = np.asarray(x_T, dtype=float)
        self.tau_bases = tuple(tau_bases)
        self.n_amb = 2 * scalar_dim(l)
        self.dim_out = scalar_dim(l + 1)
        self.koszul = tuple(
            koszul_spaces(sb, l, self.x_T) for sb in self.tau_bases
        ) if l >= 0 else ()
        self.gamma = self._build_gamma() if l >= 0 else None
        self._pot_mats = self._build_potential_mats() if l >= 0 else None
        deg_sigma = max(l + 1, 0)
        exact = sigma_exactness if sigma_exactness is not None else 2 * deg_sigma + 3
        self.sigma_bases = tuple(
            FaceBasis(deg_sigma, sf.a, sf.b, segment_rule(exact, sf.a, sf.b))
            for sf in submesh.interior_sfaces
        )

    # -- Gamma ------------------------------------------------------------

    def _build_gamma(self):
        projG, projGc, gG, gGc = [], [], [], []
        worst = 0.0
        eye = np.eye(self.n_amb)
        for ks in self.koszul:
            pg, pc = ks.projG, ks.projGc
            norm = np.linalg.norm(pg @ pc, 2) if self.n_amb else 0.0
            worst = max(worst, norm)
            if norm >= 1.0 - CONTRACTION_MARGIN:
                raise ContractionFailure(
                    f"||projG projGc|| = {norm!r} >= 1 - {CONTRACTION_MARGIN}"
                )
            projG.append(pg)
            projGc.append(pc)
            gG.append(np.linalg.inv(eye - pg @ pc))
            gGc.append(np.linalg.inv(eye - pc @ pg))
        return GammaOperators(self.l, tuple(projG), tuple(projGc), tuple(gG),
                              tuple(gGc), worst)

    def gamma_neumann(self, t, increment_tol=1e-12, max_terms=500):
        """Truncated Neumann series for gammaG on simplex t (cross-check only)."""
        pgpc = self.koszul[t].projG @ self.koszul[t].projGc
        acc = np.eye(self.n_amb)
        term = np.eye(self.n_amb)
        for _ in range(max_terms):
            term = term @ pgpc
            acc += term
            if np.linalg.norm(term, 2) < increment_tol:
                return acc
        raise ContractionFailure("Neumann series for Gamma did not converge")

    # -- potential ---------------------------------------------------------

    def _build_potential_mats(self):
        """Per-simplex matrix: ambient P^l coefficients -> P^(l+1) potential coeffs."""
        mats = []
        for t, sb in enumerate(self.tau_bases):
            ks = self.gamma
            grad_map = ks.gammaG[t] @ (ks.projG[t] - ks.projG[t] @ ks.projGc[t])
            # antiderivative: solve grad s = g in the degree-(l+1) basis
            nl = scalar_dim(self.l)
            q = sb.quad
            amb = sb.eval(q.points, dim=nl)
            g = sb.grad(q.points, dim=self.dim_out)
            dmat = np.concatenate(
                [(q.weights * g[:, 0, :].T) @ amb, (q.weights * g[:, 1, :].T) @ amb],
                axis=1,
            ).T  # (2*nl, dim_out): gradient coefficients of each basis function
            anti, *_ = np.linalg.lstsq(dmat, np.eye(2 * nl), rcond=None)
            # vanish at x_T: subtract the value there times the constant
            vx = sb.eval(self.x_T[None, :], dim=self.dim_out)[0]
            const = sb.const_coeff()[: self.dim_out]
            shift = np.eye(self.dim_out) - np.outer(const, vx)
            mats.append(shift @ anti @ grad_map)
        return tuple(mats)

    def potential_matrix(self, t):
        return self._pot_mats[t]

    def apply(self, q):
        """Potential image of a vector PiecewisePoly of degree l.

        The gradient of the result is the recovered gradient part of q and
        the value at x_T vanishes on every simplex.
        """
        if self.l < 0:
            coeffs = np.zeros((len(self.tau_bases), self.dim_out))
            return PiecewisePoly(self.l + 1, "scalar", coeffs, self.tau_bases)
        out = np.stack([self._pot_mats[t] @ q.coeffs[t] for t in range(len(q.coeffs))])
        return PiecewisePoly(self.l + 1, "scalar", out, self.tau_bases)

    def grad_apply(self, q):
        """Gradient part of the splitting (in ambient coordinates)."""
        ks = self.gamma
        out = np.stack([
            ks.gammaG[t] @ (ks.projG[t] @ q.coeffs[t]
                            - ks.projG[t] @ ks.projGc[t] @ q.coeffs[t])
            for t in range(len(q.coeffs))
        ])
        return PiecewisePoly(q.degree, "vector", out, q.bases)

    def jump(self, img, sigma_index):
        """Jump of a broken scalar across interior simplicial face sigma_index.

        Returns the coefficients of trace|tau1 - trace|tau2 in the face's
        orthonormal basis, using the stored (tau1, tau2) ordering.
        """
        sf = self.submesh.interior_sfaces[sigma_index]
        if sf.tau2 < 0:
            raise NotInteriorFace(f"simplicial face {sigma_index} is not interior")
        fb = self.sigma_bases[sigma_index]
        pts, w = fb.quad.points, fb.quad.weights
        tr = img.eval(sf.tau1, pts) - img.eval(sf.tau2, pts)
        return (w * tr) @ fb.eval(pts)

    def from_callable(self, f, rank="vector", degree=None):
        """Project a callable onto the broken space (testing helper)."""
        deg = self.l if degree is None else degree
        n = scalar_dim(deg)
        rows = []
        for sb in self.tau_bases:
            q = sb.quad
            vals = np.asarray(f(q.points), dtype=float)
            bas = sb.eval(q.points, dim=n)
            if rank == "scalar":
                rows.append((q.weights * vals) @ bas)
            else:
                rows.append(np.concatenate(
                    [(q.weights * vals[:, 0]) @ bas, (q.weights * vals[:, 1]) @ bas]
                ))
        return PiecewisePoly(deg, rank, np.stack(rows), self.tau_bases)


def build_gamma(submesh, tau_bases, l, x_T):
    """Recovery operators for the Koszul splitting at degree l on a submesh."""
    return PotentialOperator(submesh, tau_bases, l, x_T).gamma


def potential_apply(pot, q):
    """Apply rho^(l+1); see PotentialOperator.apply."""
    return pot.apply(q)


def potential_jump(pot, img, sigma_index):
    """Jump of a potential image across an interior simplicial face."""
    return pot.jump(img, sigma_index)
