"""Local HHO operators on one polygonal element.

Everything an element contributes to the global problem is precomputed here:
the discrete divergence, the divergence-preserving Raviart-Thomas-Nedelec
velocity reconstruction (one dense saddle solve per element), the unsteady
bilinear form with its stabilization, the gradient reconstruction and viscous
stabilization, convective value tensors, and the potential-jump penalty
operators. Congruent elements share a cached instance.
"""

from dataclasses import dataclass

import numpy as np

from .basis import FaceBasis, ScalarBasis, monomial_exponents, scalar_dim
from .errors import SaddleSingular
from .potential import PotentialOperator
from .quadrature import Quadrature, segment_rule, triangle_rule

DATA_EXACTNESS_FLOOR = 13
SADDLE_RTOL = 1e-9


class LocalDofLayout:
    """Dof counts of the hybrid velocity space for face degree k."""

    def __init__(self, k):
        if k < 0:
            raise ValueError("k must be >= 0")
        self.k = k
        self.k_star = k if k <= 1 else k + 1
        self.n_elem_scalar = scalar_dim(self.k_star)
        self.n_elem = 2 * self.n_elem_scalar
        self.n_face_scalar = k + 1
        self.n_face = 2 * (k + 1)
        self.n_pressure = scalar_dim(k)

    def n_local(self, n_faces):
        return self.n_elem + n_faces * self.n_face

    def forms_exactness(self):
        return max(2 * max(self.k_star, self.k + 1) + 3, 3 * (self.k + 1) + 2)


@dataclass
class LocalOperator:
    """Dense matrix from local hybrid dofs into a target polynomial space."""

    matrix: np.ndarray
    target: str


class RTBasis:
    """Raviart-Thomas-Nedelec space RT_k on one triangle.

    Realized as P_k(tau)^2 plus xi * (homogeneous degree-k monomials) in the
    scaled coordinate xi = (x - centroid)/h; dim = (k+1)(k+3).
    """

    def __init__(self, k, tri_vertices):
        self.k = k
        tri = np.asarray(tri_vertices, dtype=float)
        self.center = tri.mean(axis=0)
        d = tri[:, None, :] - tri[None, :, :]
        self.h = float(np.sqrt((d * d).sum(axis=2)).max())
        self.poly_exps = monomial_exponents(k)
        self.hom_exps = [(k - j, j) for j in range(k + 1)]
        self.n_poly = len(self.poly_exps)
        self.dim = 2 * self.n_poly + len(self.hom_exps)

    def _xi(self, pts):
        return (np.asarray(pts, dtype=float) - self.center) / self.h

    def eval(self, pts):
        xi = self._xi(pts)
        out = np.zeros((xi.shape[0], 2, self.dim))
        for c, (ax, ay) in enumerate(self.poly_exps):
            m = xi[:, 0] ** ax * xi[:, 1] ** ay
            out[:, 0, c] = m
            out[:, 1, self.n_poly + c] = m
        for j, (ax, ay) in enumerate(self.hom_exps):
            m = xi[:, 0] ** ax * xi[:, 1] ** ay
            out[:, 0, 2 * self.n_poly + j] = xi[:, 0] * m
            out[:, 1, 2 * self.n_poly + j] = xi[:, 1] * m
        return out

    def grad(self, pts):
        """Component/derivative tensor (n, comp, deriv, dim), physical coords."""
        xi = self._xi(pts)
        out = np.zeros((xi.shape[0], 2, 2, self.dim))

        def dm(ax, ay, d):
            if d == 0:
                return ax * xi[:, 0] ** (ax - 1) * xi[:, 1] ** ay if ax else 0.0
            return ay * xi[:, 0] ** ax * xi[:, 1] ** (ay - 1) if ay else 0.0

        for c, (ax, ay) in enumerate(self.poly_exps):
            for d in range(2):
                g = dm(ax, ay, d)
                out[:, 0, d, c] = g
                out[:, 1, d, self.n_poly + c] = g
        for j, (ax, ay) in enumerate(self.hom_exps):
            m = xi[:, 0] ** ax * xi[:, 1] ** ay
            col = 2 * self.n_poly + j
            for d in range(2):
                g = dm(ax, ay, d)
                out[:, 0, d, col] = xi[:, 0] * g
                out[:, 1, d, col] = xi[:, 1] * g
                out[:, d, d, col] += m
        return out / self.h

    def div(self, pts):
        g = self.grad(pts)
        return g[:, 0, 0, :] + g[:, 1, 1, :]


def _proj_rows(basis_vals, weights):
    """Matrix turning point values into coefficients on an orthonormal basis."""
    return (weights[:, None] * basis_vals).T


class ElementOperators:
    """All local operators of one element (shareable between congruent ones).

    Every matrix acts on the local dof vector
    [vT_x, vT_y, F0_x, F0_y, F1_x, ...] with component-blocked coefficients in
    the element/face orthonormal bases.
    """

    def __init__(self, k, poly, x_T, submesh, face_geoms, quad_bump=0):
        """
        Parameters
        ----------
        k : int
            Face polynomial degree.
        poly : (m, 2) array
            Element vertices, CCW.
        x_T : (2,) array
            Star center (apex of the fan submesh).
        submesh : SubMesh
            Fan triangulation of the element.
        face_geoms : list of (a, b, n_TF, n_F)
            Per face, in element order: the endpoints as stored in the global
            face record (these fix the face basis shared with the neighbour),
            the outward normal, and the globally fixed face normal.
        quad_bump : int
            Raises every quadrature exactness, for sufficiency checks.
        """
        self.k = k
        self.layout = LocalDofLayout(k)
        lay = self.layout
        self.poly = np.asarray(poly, dtype=float)
        self.x_T = np.asarray(x_T, dtype=float)
        self.submesh = submesh
        self.m = len(submesh.triangles)
        self.n_loc = lay.n_local(self.m)
        self.area = sum(t.area for t in submesh.triangles)
        self.h_T = max(
            float(np.linalg.norm(a - b)) for a in self.poly for b in self.poly
        )
        self.n_TF = [np.asarray(g[2], dtype=float) for g in face_geoms]
        self.n_F = [np.asarray(g[3], dtype=float) for g in face_geoms]
        self.h_F = [float(np.linalg.norm(np.asarray(g[1]) - np.asarray(g[0])))
                    for g in face_geoms]

        exact = lay.forms_exactness() + quad_bump
        exact_data = max(DATA_EXACTNESS_FLOOR, lay.forms_exactness()) + quad_bump
        self._build_quadrature(face_geoms, exact, exact_data)
        self._build_bases(face_geoms, k)
        self._index_maps()
        self._build_divergence()
        self._build_gradient()
        self._build_reconstruction()
        self._build_unsteady()
        self._build_viscous()
        self._build_norm_1t()
        self._build_interpolation()
        self._build_penalty()
        self._build_sigma_sides()

    # -- geometry, quadrature, bases ---------------------------------------

    def _build_quadrature(self, face_geoms, exact, exact_data):
        self.vol_q = [triangle_rule(exact, t.vertices) for t in self.submesh.triangles]
        self.vol_qd = [
            triangle_rule(exact_data, t.vertices) for t in self.submesh.triangles
        ]
        self.elem_quad = Quadrature(
            np.vstack([q.points for q in self.vol_q]),
            np.concatenate([q.weights for q in self.vol_q]),
            exact,
        )
        self.elem_quad_data = Quadrature(
            np.vstack([q.points for q in self.vol_qd]),
            np.concatenate([q.weights for q in self.vol_qd]),
            exact_data,
        )
        self.face_q = [segment_rule(exact, a, b) for a, b, _, _ in face_geoms]
        self.face_qd = [segment_rule(exact_data, a, b) for a, b, _, _ in face_geoms]
        self.sigma_q = [
            segment_rule(exact, sf.a, sf.b) for sf in self.submesh.interior_sfaces
        ]

    def _build_bases(self, face_geoms, k):
        self.elem_sb = ScalarBasis(k + 1, self.x_T, self.h_T, self.elem_quad)
        self.tau_sb = [
            ScalarBasis(k + 1, t.centroid, t.diameter, q)
            for t, q in zip(self.submesh.triangles, self.vol_q)
        ]
        self.face_fb = [
            FaceBasis(k, a, b, q) for (a, b, _, _), q in zip(face_geoms, self.face_q)
        ]
        self.spoke_fb = [
            FaceBasis(k, sf.a, sf.b, q)
            for sf, q in zip(self.submesh.interior_sfaces, self.sigma_q)
        ]
        self.rt = [RTBasis(k, t.vertices) for t in self.submesh.triangles]
        pts = self.elem_quad.points
        self._ev = self.elem_sb.eval(pts)
        self._eg = self.elem_sb.grad(pts)
        self._evf = [self.elem_sb.eval(q.points) for q in self.face_q]
        self._egf = [self.elem_sb.grad(q.points) for q in self.face_q]
        self._rhof = [fb.eval(q.points) for fb, q in zip(self.face_fb, self.face_q)]
        self._tau_ev = [self.elem_sb.eval(q.points) for q in self.vol_q]

    def _index_maps(self):
        lay = self.layout
        nes, nfs = lay.n_elem_scalar, lay.n_face_scalar
        self.sl_elem_x = np.arange(nes)
        self.sl_elem_y = nes + np.arange(nes)
        self.sl_face_x = [
            lay.n_elem + i * lay.n_face + np.arange(nfs) for i in range(self.m)
        ]
        self.sl_face_y = [
            lay.n_elem + i * lay.n_face + nfs + np.arange(nfs) for i in range(self.m)
        ]
        # single-component layout [vT | F0 | F1 | ...] used by scalar machinery
        self.n_sloc = nes + self.m * nfs
        self.xmap = np.concatenate([self.sl_elem_x] + self.sl_face_x)
        self.ymap = np.concatenate([self.sl_elem_y] + self.sl_face_y)
        w00 = self.elem_sb.eval(self.x_T[None, :])[0, 0]
        self.w0_mat = np.zeros((2, self.n_loc))
        self.w0_mat[0, self.sl_elem_x[0]] = w00
        self.w0_mat[1, self.sl_elem_y[0]] = w00

    def _scalar_to_vector(self, s_mat):
        out = np.zeros((self.n_loc, self.n_loc))
        out[np.ix_(self.xmap, self.xmap)] += s_mat
        out[np.ix_(self.ymap, self.ymap)] += s_mat
        return out

    # -- divergence and gradient reconstruction ----------------------------

    def _build_divergence(self):
        lay = self.layout
        npr, nes = lay.n_pressure, lay.n_elem_scalar
        w = self.elem_quad.weights
        qg = self._eg[:, :, :npr]
        ev = self._ev[:, :nes]
        D = np.zeros((npr, self.n_loc))
        D[:, self.sl_elem_x] = -((w[:, None] * qg[:, 0, :]).T @ ev)
        D[:, self.sl_elem_y] = -((w[:, None] * qg[:, 1, :]).T @ ev)
        for i in range(self.m):
            fq = self.face_q[i]
            blk = (fq.weights[:, None] * self._evf[i][:, :npr]).T @ self._rhof[i]
            D[:, self.sl_face_x[i]] = self.n_TF[i][0] * blk
            D[:, self.sl_face_y[i]] = self.n_TF[i][1] * blk
        self.D = D

    def _build_gradient(self):
        lay = self.layout
        nk, nes = scalar_dim(self.k), lay.n_elem_scalar
        w = self.elem_quad.weights
        qg = self._eg[:, :, :nk]
        ev = self._ev[:, :nes]
        self.G = {}
        for c in range(2):
            col_elem = self.sl_elem_x if c == 0 else self.sl_elem_y
            cols_face = self.sl_face_x if c == 0 else self.sl_face_y
            for d in range(2):
                g = np.zeros((nk, self.n_loc))
                g[:, col_elem] = -((w[:, None] * qg[:, d, :]).T @ ev)
                for i in range(self.m):
                    blk = (self.face_q[i].weights[:, None]
                           * self._evf[i][:, :nk]).T @ self._rhof[i]
                    g[:, cols_face[i]] += self.n_TF[i][d] * blk
                self.G[(c, d)] = g

    # -- RTN reconstruction --------------------------------------------------

    def _build_reconstruction(self):
        lay = self.layout
        k, m = self.k, self.m
        nfs = k + 1
        n_mom = 2 * scalar_dim(k - 1)
        self.n_rt_dof = 2 * m * nfs + m * n_mom
        spoke_off = [j * nfs for j in range(m)]
        bd_off = [m * nfs + i * nfs for i in range(m)]
        mom_off = [2 * m * nfs + t * n_mom for t in range(m)]
        bd_ids = np.arange(m * nfs, 2 * m * nfs)
        free_ids = np.concatenate(
            [np.arange(m * nfs), np.arange(2 * m * nfs, self.n_rt_dof)]
        )
        self.gdofs = [
            np.concatenate([
                spoke_off[t] + np.arange(nfs),
                spoke_off[(t + 1) % m] + np.arange(nfs),
                bd_off[t] + np.arange(nfs),
                mom_off[t] + np.arange(n_mom),
            ])
            for t in range(m)
        ]

        # Koszul machinery at degree k-1 (pole x_T); also drives the penalty
        self.pot = PotentialOperator(
            self.submesh, self.tau_sb, k - 1, self.x_T,
            sigma_exactness=self.elem_quad.exactness_degree,
        )

        n_psi_t = scalar_dim(k)
        n_th_t = scalar_dim(k - 2)  # dim of (x-x_T)^perp P^(k-2) per simplex
        mass = np.zeros((self.n_rt_dof, self.n_rt_dof))
        divm = np.zeros((m * n_psi_t, self.n_rt_dof))
        xim = np.zeros((m * n_th_t, self.n_rt_dof))
        rhs_div = np.zeros((m * n_psi_t, self.n_loc))
        rhs_xi = np.zeros((m * n_th_t, self.n_loc))
        rhs_b = np.zeros((self.n_rt_dof, self.n_loc))
        self.rt_C = []
        for t in range(m):
            rt, sb, q = self.rt[t], self.tau_sb[t], self.vol_q[t]
            pts, w = q.points, q.weights
            bvals = rt.eval(pts)
            V = np.zeros((rt.dim, rt.dim))
            row = 0
            for sp in (t, (t + 1) % m):
                sf = self.submesh.interior_sfaces[sp]
                fq = self.sigma_q[sp]
                ncomp = np.einsum("qcb,c->qb", rt.eval(fq.points), sf.n)
                V[row:row + nfs] = (fq.weights[:, None]
                                    * self.spoke_fb[sp].eval(fq.points)).T @ ncomp
                row += nfs
            fq = self.face_q[t]
            ncomp = np.einsum("qcb,c->qb", rt.eval(fq.points), self.n_F[t])
            V[row:row + nfs] = (fq.weights[:, None]
                                * self.face_fb[t].eval(fq.points)).T @ ncomp
            row += nfs
            if n_mom:
                chi = sb.eval(pts, dim=scalar_dim(k - 1))
                V[row:row + n_mom // 2] = (w[:, None] * chi).T @ bvals[:, 0, :]
                V[row + n_mom // 2:row + n_mom] = (w[:, None] * chi).T @ bvals[:, 1, :]
            try:
                C = np.linalg.inv(V)
            except np.linalg.LinAlgError as exc:
                raise SaddleSingular(
                    f"RT unisolvence failed on simplex {t}: {exc}"
                ) from exc
            self.rt_C.append(C)
            gd = self.gdofs[t]
            mloc = np.einsum("q,qcb,qcd->bd", w, bvals, bvals)
            mass[np.ix_(gd, gd)] += C.T @ mloc @ C
            psi_vals = sb.eval(pts, dim=n_psi_t)
            divm[t * n_psi_t:(t + 1) * n_psi_t, gd] += \
                ((w[:, None] * psi_vals).T @ rt.div(pts)) @ C
            cross = (w[:, None] * psi_vals).T @ self._tau_ev[t][:, :lay.n_pressure]
            rhs_div[t * n_psi_t:(t + 1) * n_psi_t] = cross @ self.D
            ev = self._tau_ev[t][:, :lay.n_elem_scalar]
            if n_th_t:
                ks = self.pot.koszul[t]
                namb = scalar_dim(k - 1)
                amb = sb.eval(pts, dim=namb)
                xvals = np.stack([amb @ ks.Gc[:namb], amb @ ks.Gc[namb:]], axis=1)
                xim[t * n_th_t:(t + 1) * n_th_t, gd] += \
                    np.einsum("q,qcb,qcj->jb", w, bvals, xvals) @ C
                blk = np.zeros((n_th_t, self.n_loc))
                blk[:, self.sl_elem_x] = (w[:, None] * xvals[:, 0, :]).T @ ev
                blk[:, self.sl_elem_y] = (w[:, None] * xvals[:, 1, :]).T @ ev
                rhs_xi[t * n_th_t:(t + 1) * n_th_t] = blk
            blk = np.zeros((rt.dim, self.n_loc))
            blk[:, self.sl_elem_x] = (w[:, None] * bvals[:, 0, :]).T @ ev
            blk[:, self.sl_elem_y] = (w[:, None] * bvals[:, 1, :]).T @ ev
            rhs_b[gd] += C.T @ blk

        # boundary normal dofs are fixed directly by the face unknowns
        bmat = np.zeros((m * nfs, self.n_loc))
        for i in range(m):
            rows = slice(i * nfs, (i + 1) * nfs)
            bmat[rows, self.sl_face_x[i]] = self.n_F[i][0] * np.eye(nfs)
            bmat[rows, self.sl_face_y[i]] = self.n_F[i][1] * np.eye(nfs)

        nf = free_ids.size
        n_psi, n_th = m * n_psi_t, m * n_th_t
        A = np.zeros((n_psi + n_th + nf, nf + n_psi + n_th))
        rhs = np.zeros((A.shape[0], self.n_loc))
        A[:n_psi, :nf] = divm[:, free_ids]
        rhs[:n_psi] = rhs_div - divm[:, bd_ids] @ bmat
        A[n_psi:n_psi + n_th, :nf] = xim[:, free_ids]
        rhs[n_psi:n_psi + n_th] = rhs_xi - xim[:, bd_ids] @ bmat
        A[n_psi + n_th:, :nf] = mass[np.ix_(free_ids, free_ids)]
        A[n_psi + n_th:, nf:nf + n_psi] = divm[:, free_ids].T
        A[n_psi + n_th:, nf + n_psi:] = xim[:, free_ids].T
        rhs[n_psi + n_th:] = rhs_b[free_ids] - mass[np.ix_(free_ids, bd_ids)] @ bmat

        sol, _, rank, _ = np.linalg.lstsq(A, rhs, rcond=None)
        if rank != A.shape[1] - 1:
            raise SaddleSingular(
                f"local mixed system rank {rank}, expected {A.shape[1] - 1}"
            )
        resid = np.linalg.norm(A @ sol - rhs)
        scale = max(np.linalg.norm(rhs), 1.0)
        if resid > SADDLE_RTOL * scale:
            raise SaddleSingular(f"local mixed system residual {resid / scale:.3e}")

        self.R_map = np.zeros((self.n_rt_dof, self.n_loc))
        self.R_map[free_ids] = sol[:nf]
        self.R_map[bd_ids] = bmat
        self.rt_mass = mass
        self.RC = [self.rt_C[t] @ self.R_map[self.gdofs[t]] for t in range(m)]
        self.Rval = [
            np.einsum("qcb,bl->qcl", self.rt[t].eval(self.vol_q[t].points), self.RC[t])
            for t in range(m)
        ]
        self.Rgrad = [
            np.einsum("qcdb,bl->qcdl",
                      self.rt[t].grad(self.vol_q[t].points), self.RC[t])
            for t in range(m)
        ]
        self.Rval_data = [
            np.einsum("qcb,bl->qcl",
                      self.rt[t].eval(self.vol_qd[t].points), self.RC[t])
            for t in range(m)
        ]
        self.Rdiv = [
            self.rt[t].div(self.vol_q[t].points) @ self.RC[t] for t in range(m)
        ]

    # -- unsteady form -------------------------------------------------------

    def _build_unsteady(self):
        nes = self.layout.n_elem_scalar
        rmass = self.R_map.T @ self.rt_mass @ self.R_map
        p_rt = self.pi_elem_of_R(self.layout.k_star)
        d_t = p_rt.copy()
        d_t[:nes, self.sl_elem_x] -= np.eye(nes)
        d_t[nes:, self.sl_elem_y] -= np.eye(nes)
        self.delta_T = d_t
        stab = d_t.T @ d_t
        self.delta_F = []
        for i in range(self.m):
            fq = self.face_q[i]
            rvals = np.einsum("qcb,bl->qcl", self.rt[i].eval(fq.points), self.RC[i])
            rho = self._rhof[i]
            nfs = self.layout.n_face_scalar
            d_f = np.zeros((2 * nfs, self.n_loc))
            d_f[:nfs] = (fq.weights[:, None] * rho).T @ rvals[:, 0, :]
            d_f[nfs:] = (fq.weights[:, None] * rho).T @ rvals[:, 1, :]
            d_f[:nfs, self.sl_face_x[i]] -= np.eye(nfs)
            d_f[nfs:, self.sl_face_y[i]] -= np.eye(nfs)
            self.delta_F.append(d_f)
            stab += self.h_F[i] * (d_f.T @ d_f)
        self.r_mass = rmass
        art = rmass + stab
        self.ART = 0.5 * (art + art.T)

    # -- viscous form ----------------------------------------------------------

    def _build_viscous(self):
        lay = self.layout
        acons = np.zeros((self.n_loc, self.n_loc))
        for g in self.G.values():
            acons += g.T @ g
        nes, nfs = lay.n_elem_scalar, lay.n_face_scalar
        nrec = scalar_dim(self.k + 1)
        pts, w = self.elem_quad.points, self.elem_quad.weights
        if lay.k_star == self.k:
            # potential reconstruction p^{k+1}, classical stabilization
            K = np.einsum("q,qdi,qdj->ij", w, self._eg, self._eg)
            rhs = np.zeros((nrec, self.n_sloc))
            rhs[:, :nes] = -(
                (w[:, None] * self.elem_sb.laplacian(pts)).T @ self._ev[:, :nes]
            )
            for i in range(self.m):
                fq = self.face_q[i]
                dn = np.einsum("qdj,d->qj", self._egf[i], self.n_TF[i])
                rhs[:, nes + i * nfs:nes + (i + 1) * nfs] = \
                    (fq.weights[:, None] * dn).T @ self._rhof[i]
            p_rec = np.zeros((nrec, self.n_sloc))
            p_rec[1:] = np.linalg.solve(K[1:, 1:], rhs[1:])
            p_rec[0, 0] = 1.0  # closure: the reconstruction keeps the mean of v_T
            self.p_rec = p_rec
            d_t = p_rec[:nes].copy()
            d_t[:, :nes] -= np.eye(nes)
            s_sc = np.zeros((self.n_sloc, self.n_sloc))
            for i in range(self.m):
                fq = self.face_q[i]
                proj_f = (fq.weights[:, None] * self._rhof[i]).T @ self._evf[i][:, :nrec]
                d_f = proj_f @ p_rec
                d_f[:, nes + i * nfs:nes + (i + 1) * nfs] -= np.eye(nfs)
                evals = self._rhof[i] @ d_f - self._evf[i][:, :nes] @ d_t
                s_sc += (evals * fq.weights[:, None]).T @ evals / self.h_F[i]
        else:
            # enriched element space: face-projection stabilization
            self.p_rec = None
            s_sc = np.zeros((self.n_sloc, self.n_sloc))
            for i in range(self.m):
                fq = self.face_q[i]
                proj_t = (fq.weights[:, None] * self._rhof[i]).T @ self._evf[i][:, :nes]
                d = np.zeros((nfs, self.n_sloc))
                d[:, :nes] = -proj_t
                d[:, nes + i * nfs:nes + (i + 1) * nfs] += np.eye(nfs)
                s_sc += d.T @ d / self.h_F[i]
        self.S_visc = self._scalar_to_vector(s_sc)
        a_visc = acons + self.S_visc
        self.A_visc = 0.5 * (a_visc + a_visc.T)

    def _build_norm_1t(self):
        nes, nfs = self.layout.n_elem_scalar, self.layout.n_face_scalar
        w = self.elem_quad.weights
        eg = self._eg[:, :, :nes]
        full = np.zeros((self.n_sloc, self.n_sloc))
        full[:nes, :nes] = np.einsum("q,qdi,qdj->ij", w, eg, eg)
        for i in range(self.m):
            fq = self.face_q[i]
            d = np.zeros((fq.weights.size, self.n_sloc))
            d[:, :nes] = -self._evf[i][:, :nes]
            d[:, nes + i * nfs:nes + (i + 1) * nfs] = self._rhof[i]
            full += (d * fq.weights[:, None]).T @ d / self.h_F[i]
        self.N1 = self._scalar_to_vector(full)

    # -- interpolation ----------------------------------------------------------

    def _build_interpolation(self):
        qd = self.elem_quad_data
        evd = self.elem_sb.eval(qd.points, dim=self.layout.n_elem_scalar)
        self.W_int_elem = _proj_rows(evd, qd.weights)  # (nes, nq)
        self.W_int_face = [
            _proj_rows(self.face_fb[i].eval(fqd.points), fqd.weights)
            for i, fqd in enumerate(self.face_qd)
        ]

    def interpolate(self, v):
        """Local dofs of I_T^k v for a callable v: (n, 2) points -> (n, 2) values."""
        out = np.zeros(self.n_loc)
        vals = np.asarray(v(self.elem_quad_data.points), dtype=float)
        out[self.sl_elem_x] = self.W_int_elem @ vals[:, 0]
        out[self.sl_elem_y] = self.W_int_elem @ vals[:, 1]
        for i, fqd in enumerate(self.face_qd):
            fvals = np.asarray(v(fqd.points), dtype=float)
            out[self.sl_face_x[i]] = self.W_int_face[i] @ fvals[:, 0]
            out[self.sl_face_y[i]] = self.W_int_face[i] @ fvals[:, 1]
        return out

    # -- convective penalty -------------------------------------------------------

    def _build_penalty(self):
        self.pen_J = []
        self.pen_P = None
        k = self.k
        if k == 0:
            return
        nk = scalar_dim(k)
        nkm1 = scalar_dim(k - 1)
        dgrad = []  # per simplex, per direction a: (2*nkm1, n_loc)
        for t in range(self.m):
            w = self.vol_q[t].weights
            chi = self.tau_sb[t].eval(self.vol_q[t].points, dim=nkm1)
            per_dir = []
            for a in range(2):
                g = self.Rgrad[t][:, :, a, :]
                per_dir.append(np.concatenate([
                    (w[:, None] * chi).T @ g[:, 0, :],
                    (w[:, None] * chi).T @ g[:, 1, :],
                ]))
            dgrad.append(per_dir)
        for j, sf in enumerate(self.submesh.interior_sfaces):
            fb = self.pot.sigma_bases[j]
            fq = fb.quad
            rho = fb.eval(fq.points)
            tr1 = (fq.weights[:, None] * rho).T @ self.tau_sb[sf.tau1].eval(
                fq.points, dim=nk)
            tr2 = (fq.weights[:, None] * rho).T @ self.tau_sb[sf.tau2].eval(
                fq.points, dim=nk)
            p1 = tr1 @ self.pot.potential_matrix(sf.tau1)
            p2 = tr2 @ self.pot.potential_matrix(sf.tau2)
            jx = p1 @ dgrad[sf.tau1][0] - p2 @ dgrad[sf.tau2][0]
            jy = p1 @ dgrad[sf.tau1][1] - p2 @ dgrad[sf.tau2][1]
            self.pen_J.append((jx, jy))
        pxx = sum(jx.T @ jx for jx, _ in self.pen_J)
        pxy = sum(jx.T @ jy for jx, jy in self.pen_J)
        pyy = sum(jy.T @ jy for _, jy in self.pen_J)
        self.pen_P = (pxx, pxy, pyy)

    def penalty_matrix(self, w0):
        """Penalty bilinear form for transport cell average w0 = (wx, wy)."""
        if self.pen_P is None:
            return np.zeros((self.n_loc, self.n_loc))
        pxx, pxy, pyy = self.pen_P
        return (w0[0] * w0[0] * pxx + w0[0] * w0[1] * (pxy + pxy.T)
                + w0[1] * w0[1] * pyy)

    def _build_sigma_sides(self):
        """R traces on both sides of interior simplicial faces and on mesh faces."""
        self.sigma_side = []
        for j, sf in enumerate(self.submesh.interior_sfaces):
            fq = self.sigma_q[j]
            s1 = np.einsum("qcb,bl->qcl", self.rt[sf.tau1].eval(fq.points),
                           self.RC[sf.tau1])
            s2 = np.einsum("qcb,bl->qcl", self.rt[sf.tau2].eval(fq.points),
                           self.RC[sf.tau2])
            self.sigma_side.append((s1, s2))
        self.face_side = [
            np.einsum("qcb,bl->qcl", self.rt[i].eval(self.face_q[i].points),
                      self.RC[i])
            for i in range(self.m)
        ]

    # -- helpers used by forms, solver, and tests ---------------------------------

    def pi_elem_of_R(self, degree):
        """Matrix of pi_T^degree composed with the reconstruction."""
        n = scalar_dim(degree)
        out = np.zeros((2 * n, self.n_loc))
        for t in range(self.m):
            w = self.vol_q[t].weights
            ev = self._tau_ev[t][:, :n]
            out[:n] += (w[:, None] * ev).T @ self.Rval[t][:, 0, :]
            out[n:] += (w[:, None] * ev).T @ self.Rval[t][:, 1, :]
        return out

    def pi_elem_of_vT(self, degree):
        """Matrix of pi_T^degree applied to the element unknown."""
        n = scalar_dim(degree)
        nes = self.layout.n_elem_scalar
        take = min(n, nes)
        out = np.zeros((2 * n, self.n_loc))
        out[np.arange(take), self.sl_elem_x[:take]] = 1.0
        out[n + np.arange(take), self.sl_elem_y[:take]] = 1.0
        return out

    def divergence_values(self, local_dofs):
        """Per-simplex point values of div(R v) at the volume quadrature points."""
        return [rdiv @ local_dofs for rdiv in self.Rdiv]


class OperatorCache:
    """Builds ElementOperators, sharing instances between congruent elements."""

    def __init__(self, mesh, k, quad_bump=0):
        self.mesh = mesh
        self.k = k
        self.quad_bump = quad_bump
        self._store = {}
        self.built = 0

    def _signature(self, element, faces):
        parts = [np.asarray([float(self.k), float(self.quad_bump),
                             float(len(element.vertex_ids))])]
        pts = self.mesh.vertices[list(element.vertex_ids)]
        parts.append((pts - element.x_T).ravel())
        for f in faces:
            owner = 1.0 if f.elements[0] == element.id else -1.0
            parts.append(np.concatenate([
                f.a - element.x_T, f.b - element.x_T, f.normal, [owner]
            ]))
        return np.round(np.concatenate(parts), 12).tobytes()

    def get(self, element):
        faces = [self.mesh.faces[fid] for fid in element.face_ids]
        key = self._signature(element, faces)
        ops = self._store.get(key)
        if ops is None:
            geoms = [
                (f.a, f.b, self.mesh.normal_out_of(element.id, f), f.normal)
                for f in faces
            ]
            ops = ElementOperators(
                self.k, self.mesh.vertices[list(element.vertex_ids)],
                element.x_T, element.submesh, geoms, self.quad_bump,
            )
            self._store[key] = ops
            self.built += 1
        return ops


def divergence_op(ops):
    """Discrete divergence D_T^k as a LocalOperator."""
    return LocalOperator(ops.D, f"P^{ops.k}(T)")


def velocity_reconstruction(ops):
    """Divergence-preserving reconstruction R_T^k (dof-space matrix)."""
    return LocalOperator(ops.R_map, f"RTN^{ops.k}(submesh)")


def unsteady_form(ops):
    """Mass-like local bilinear form a_RT (reconstruction + stabilization)."""
    return ops.ART


def interpolate(ops, v):
    """Local interpolation I_T^k of a smooth vector field."""
    return ops.interpolate(v)
