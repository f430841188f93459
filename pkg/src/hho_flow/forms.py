"""Global forms: viscous, pressure coupling, body force, and upwinded convection.

The convective form is reassembled every time step, so its structure is
grouped once by congruence class: one batch per (element operators, kept-dof
mask) pair for volume and penalty terms, one batch per interface class for the
centered/upwind face terms. Within a batch everything reduces to a handful of
large einsum contractions.
"""

import numpy as np
import scipy.sparse as sp

from .errors import TransportNotDivergenceFree
from .reconstruct import LocalOperator

DIV_FREE_TOL = 1e-8


def gradient_reconstruction(ops):
    """Local gradient reconstruction G_T^k, stacked row-blocks (c, d)."""
    mat = np.vstack([ops.G[(c, d)] for c in range(2) for d in range(2)])
    return LocalOperator(mat, f"P^{ops.k}(T)^(2x2)")


def viscous_form(ops):
    """Local viscous bilinear form: gradient contraction plus stabilization."""
    return ops.A_visc


def coupling_form(ops):
    """Local pressure-velocity coupling block: b_T(v, q) = -int_T (D_T v) q."""
    return -ops.D


def jump_average(poly, sface, face_basis):
    """Jump and average of a broken polynomial across an interior simplicial face.

    Uses the stored (tau1, tau2) ordering of the face; returns coefficient
    vectors on ``face_basis``. Swapping the ordering negates the jump and
    leaves the average unchanged.
    """
    q = face_basis.quad
    v1 = poly.eval(sface.tau1, q.points)
    v2 = poly.eval(sface.tau2, q.points)
    rho = face_basis.eval(q.points)
    if v1.ndim == 1:
        jump = (q.weights * (v1 - v2)) @ rho
        avg = (q.weights * (0.5 * (v1 + v2))) @ rho
    else:
        jump = np.concatenate([(q.weights * (v1 - v2)[:, c]) @ rho for c in range(2)])
        avg = np.concatenate(
            [(q.weights * 0.5 * (v1 + v2)[:, c]) @ rho for c in range(2)]
        )
    return jump, avg


def body_force(bound, gidx, kmask, n_vel, phi):
    """Reference implementation of the load vector l_h(phi, .) = int phi . R_h v."""
    rhs = np.zeros(n_vel)
    for T, (ops, offset) in enumerate(bound):
        loc = np.zeros(ops.n_loc)
        for t in range(ops.m):
            q = ops.vol_qd[t]
            vals = np.asarray(phi(q.points + offset), dtype=float)
            loc += np.einsum("q,qc,qcl->l", q.weights, vals, ops.Rval_data[t])
        rhs[gidx[T]] += loc[kmask[T]]
    return rhs


class ConvectionContext:
    """Per-step transport data, stored batch by batch."""

    def __init__(self, w, w_stacks, w0_stacks):
        self.w = w
        self.w_stacks = w_stacks  # per element group: (nE, n_loc)
        self.w0_stacks = w0_stacks  # per element group: (nE, 2)


class ConvectionAssembler:
    """Precomputed structure of the convective trilinear form on one mesh."""

    def __init__(self, mesh, bound, gidx, kmask, n_vel):
        self.mesh = mesh
        self.bound = bound
        self.gidx = gidx
        self.kmask = kmask
        self.n_vel = n_vel
        self._build_groups()

    # -- structure -----------------------------------------------------------

    def _group_key(self, T):
        return (id(self.bound[T][0]), self.kmask[T].tobytes())

    def _build_groups(self):
        # element congruence classes
        by_key = {}
        self.elem_group_of = np.empty(len(self.bound), dtype=int)
        self.elem_pos_in_group = np.empty(len(self.bound), dtype=int)
        groups = {}
        for T in range(len(self.bound)):
            gid = by_key.setdefault(self._group_key(T), len(by_key))
            groups.setdefault(gid, []).append(T)
        self.elem_groups = []
        pos = 0
        for gid in sorted(groups):
            elems = np.array(groups[gid], dtype=int)
            ops = self.bound[elems[0]][0]
            km = self.kmask[elems[0]]
            gi = np.stack([self.gidx[T] for T in elems])
            nk = km.size
            data_idx = pos + np.arange(elems.size * nk * nk).reshape(elems.size, -1)
            pos += elems.size * nk * nk
            for j, T in enumerate(elems):
                self.elem_group_of[T] = len(self.elem_groups)
                self.elem_pos_in_group[T] = j
            self.elem_groups.append({
                "elems": elems, "ops": ops, "km": km, "gi": gi,
                "data_idx": data_idx,
            })
        # mesh-interface classes
        inter = {}
        for f in self.mesh.faces:
            if f.is_boundary:
                continue
            t1, t2 = f.elements
            i1 = list(self.mesh.elements[t1].face_ids).index(f.id)
            i2 = list(self.mesh.elements[t2].face_ids).index(f.id)
            key = (self._group_key(t1), i1, self._group_key(t2), i2,
                   np.round(f.normal, 12).tobytes())
            inter.setdefault(key, []).append((t1, t2))
        self.inter_groups = []
        for key, pairs in sorted(inter.items(), key=lambda kv: kv[1][0]):
            t1, t2 = pairs[0]
            ops1, ops2 = self.bound[t1][0], self.bound[t2][0]
            i1, i2 = key[1], key[3]
            k1, k2 = self.kmask[t1], self.kmask[t2]
            V1 = ops1.face_side[i1][:, :, k1]
            V2 = ops2.face_side[i2][:, :, k2]
            J = np.concatenate([V1, -V2], axis=2)
            Avg = 0.5 * np.concatenate([V1, V2], axis=2)
            n_cat = J.shape[2]
            t1s = np.array([p[0] for p in pairs], dtype=int)
            t2s = np.array([p[1] for p in pairs], dtype=int)
            gi = np.concatenate(
                [np.stack([self.gidx[t] for t in t1s]),
                 np.stack([self.gidx[t] for t in t2s])], axis=1,
            )
            data_idx = pos + np.arange(len(pairs) * n_cat * n_cat).reshape(
                len(pairs), -1)
            pos += len(pairs) * n_cat * n_cat
            self.inter_groups.append({
                "t1": t1s, "t2": t2s, "i1": i1,
                "V1full": ops1.face_side[i1], "J": J, "Avg": Avg,
                "wq": ops1.face_q[i1].weights,
                "n": np.frombuffer(key[4], dtype=float).copy(),
                "gi": gi, "data_idx": data_idx,
            })
        rows = np.empty(pos, dtype=np.int64)
        cols = np.empty(pos, dtype=np.int64)
        for g in self.elem_groups:
            nk = g["km"].size
            r = np.repeat(g["gi"], nk, axis=1)
            c = np.tile(g["gi"], (1, nk))
            rows[g["data_idx"].ravel()] = r.ravel()
            cols[g["data_idx"].ravel()] = c.ravel()
        for g in self.inter_groups:
            n_cat = g["J"].shape[2]
            r = np.repeat(g["gi"], n_cat, axis=1)
            c = np.tile(g["gi"], (1, n_cat))
            rows[g["data_idx"].ravel()] = r.ravel()
            cols[g["data_idx"].ravel()] = c.ravel()
        self._rows, self._cols, self._nnz = rows, cols, pos

    # -- per-step work ---------------------------------------------------------

    def gather(self, u):
        """Stack a global vector into full local dof vectors per element group."""
        out = []
        for g in self.elem_groups:
            ops, km = g["ops"], g["km"]
            W = np.zeros((g["elems"].size, ops.n_loc))
            W[:, km] = u[g["gi"]]
            out.append(W)
        return out

    def context(self, w, check=True):
        """Prepare transport data; verifies the divergence-free precondition."""
        w_stacks = self.gather(w)
        w0_stacks = []
        for g, W in zip(self.elem_groups, w_stacks):
            ops = g["ops"]
            if check:
                dn = np.linalg.norm(W @ ops.D.T, axis=1)
                if dn.size and dn.max() > DIV_FREE_TOL:
                    T = g["elems"][int(np.argmax(dn))]
                    raise TransportNotDivergenceFree(
                        f"element {T}: ||D_T w|| = {dn.max():.3e} > {DIV_FREE_TOL}"
                    )
            w0_stacks.append(W @ ops.w0_mat.T)
        return ConvectionContext(w, w_stacks, w0_stacks)

    def matrix(self, ctx):
        """Sparse matrix C with z^T C v = t_h(w, v, z)."""
        data = np.zeros(self._nnz)
        for g, W, W0 in zip(self.elem_groups, ctx.w_stacks, ctx.w0_stacks):
            ops, km = g["ops"], g["km"]
            nE = g["elems"].size
            loc = np.zeros((nE, ops.n_loc, ops.n_loc))
            for t in range(ops.m):
                rw = np.einsum("qcl,el->eqc", ops.Rval[t], W)
                conv = np.einsum("eqd,qcdj->eqcj", rw, ops.Rgrad[t])
                loc += np.einsum("q,qci,eqcj->eij", ops.vol_q[t].weights,
                                 ops.Rval[t], conv, optimize=True)
            for j in range(len(ops.submesh.interior_sfaces)):
                s1, s2 = ops.sigma_side[j]
                n = ops.submesh.interior_sfaces[j].n
                wq = ops.sigma_q[j].weights
                s = np.einsum("qcl,el,c->eq", s1, W, n)
                J = s1 - s2
                Avg = 0.5 * (s1 + s2)
                loc -= np.einsum("eq,qci,qcj->eij", wq * s, Avg, J, optimize=True)
                loc += 0.5 * np.einsum("eq,qci,qcj->eij", wq * np.abs(s), J, J,
                                       optimize=True)
            if ops.pen_P is not None:
                pxx, pxy, pyy = ops.pen_P
                loc += np.einsum("e,ij->eij", W0[:, 0] * W0[:, 0], pxx)
                loc += np.einsum("e,ij->eij", W0[:, 0] * W0[:, 1], pxy + pxy.T)
                loc += np.einsum("e,ij->eij", W0[:, 1] * W0[:, 1], pyy)
            data[g["data_idx"]] = loc[:, km][:, :, km].reshape(nE, -1)
        for g in self.inter_groups:
            W1 = self._stack_rows(ctx, g["t1"])
            s = np.einsum("qcl,el,c->eq", g["V1full"], W1, g["n"])
            wq = g["wq"]
            loc = -np.einsum("eq,qci,qcj->eij", wq * s, g["Avg"], g["J"],
                             optimize=True)
            loc += 0.5 * np.einsum("eq,qci,qcj->eij", wq * np.abs(s), g["J"], g["J"],
                                   optimize=True)
            data[g["data_idx"]] = loc.reshape(g["t1"].size, -1)
        C = sp.coo_matrix((data, (self._rows, self._cols)),
                          shape=(self.n_vel, self.n_vel))
        return C.tocsr()

    def _stack_rows(self, ctx, elems):
        """Full local dof vectors of selected elements from a gathered context."""
        return self._stack_from(ctx.w_stacks, elems)

    def trilinear(self, ctx, v, z):
        """t_h(w, v, z) evaluated through the assembled matrix."""
        return float(z @ (self.matrix(ctx) @ v))

    def dissipation_parts(self, ctx, v):
        """Explicit nonnegative decomposition of t_h(w, v, v).

        Returns (upwind, penalty); their sum equals t_h(w, v, v) up to
        roundoff when the transport is discretely divergence-free.
        """
        v_stacks = self.gather(v)
        upwind = 0.0
        for g, W, V in zip(self.elem_groups, ctx.w_stacks, v_stacks):
            ops = g["ops"]
            for j in range(len(ops.submesh.interior_sfaces)):
                s1, s2 = ops.sigma_side[j]
                n = ops.submesh.interior_sfaces[j].n
                wq = ops.sigma_q[j].weights
                s = np.einsum("qcl,el,c->eq", s1, W, n)
                jump = np.einsum("qcl,el->eqc", s1 - s2, V)
                upwind += 0.5 * float(
                    np.einsum("eq,eqc,eqc->", wq * np.abs(s), jump, jump)
                )
        for g in self.inter_groups:
            W1 = self._stack_rows(ctx, g["t1"])
            s = np.einsum("qcl,el,c->eq", g["V1full"], W1, g["n"])
            vcat = self._cat_kept(v_stacks, g)
            jump = np.einsum("qci,ei->eqc", g["J"], vcat)
            upwind += 0.5 * float(
                np.einsum("eq,eqc,eqc->", g["wq"] * np.abs(s), jump, jump)
            )
        penalty = 0.0
        for g, W0, V in zip(self.elem_groups, ctx.w0_stacks, v_stacks):
            ops = g["ops"]
            if ops.pen_P is None:
                continue
            pxx, pxy, pyy = ops.pen_P
            for e in range(V.shape[0]):
                pen = (W0[e, 0] ** 2 * pxx + W0[e, 0] * W0[e, 1] * (pxy + pxy.T)
                       + W0[e, 1] ** 2 * pyy)
                penalty += float(V[e] @ pen @ V[e])
        return upwind, penalty

    def _cat_kept(self, stacks, g):
        """Kept-dof rows of both sides of an interface group, concatenated."""
        k1 = self.kmask[g["t1"][0]]
        k2 = self.kmask[g["t2"][0]]
        a = self._stack_from(stacks, g["t1"])[:, k1]
        b = self._stack_from(stacks, g["t2"])[:, k2]
        return np.concatenate([a, b], axis=1)

    def _stack_from(self, stacks, elems):
        out = np.empty((elems.size, self.bound[elems[0]][0].n_loc))
        for j, T in enumerate(elems):
            out[j] = stacks[self.elem_group_of[T]][self.elem_pos_in_group[T]]
        return out

    def upwind_jump_sq(self, ctx, e):
        """Sum over interior simplicial faces of int |Rw.n| [[Re]]^2."""
        e_stacks = self.gather(e)
        total = 0.0
        for g, W, E in zip(self.elem_groups, ctx.w_stacks, e_stacks):
            ops = g["ops"]
            for j in range(len(ops.submesh.interior_sfaces)):
                s1, s2 = ops.sigma_side[j]
                n = ops.submesh.interior_sfaces[j].n
                wq = ops.sigma_q[j].weights
                s = np.einsum("qcl,el,c->eq", s1, W, n)
                jump = np.einsum("qcl,el->eqc", s1 - s2, E)
                total += float(np.einsum("eq,eqc,eqc->", wq * np.abs(s), jump, jump))
        for g in self.inter_groups:
            W1 = self._stack_rows(ctx, g["t1"])
            s = np.einsum("qcl,el,c->eq", g["V1full"], W1, g["n"])
            ecat = self._cat_kept(e_stacks, g)
            jump = np.einsum("qci,ei->eqc", g["J"], ecat)
            total += float(np.einsum("eq,eqc,eqc->", g["wq"] * np.abs(s), jump, jump))
        return total
