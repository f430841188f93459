"""Global dof management, saddle-point assembly, and the IMEX-BDF2 time loop.

The per-step linear system couples the hybrid velocity unknowns (boundary face
dofs eliminated), the full broken pressure space, and one scalar Lagrange
multiplier enforcing the zero pressure mean. The convective block is
reassembled and the matrix refactorized every step; all other blocks are
time-invariant.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ExtrapolantNotDivFree, InsufficientHistory, LinearSolveFailure
from .forms import ConvectionAssembler, body_force, coupling_form, viscous_form
from .reconstruct import LocalDofLayout, OperatorCache, unsteady_form

log = logging.getLogger(__name__)

SOLVE_RTOL = 1e-10
DIV_STEP_TOL = 1e-9
PRESSURE_MEAN_TOL = 1e-10


class DofMap:
    """Offsets of element velocity, interior-face velocity, and pressure dofs.

    Boundary face unknowns are eliminated (wall condition v_F = 0); the
    reported ``n_dof`` counts velocity plus pressure unknowns, excluding the
    zero-mean multiplier.
    """

    def __init__(self, mesh, layout):
        self.layout = layout
        ne = len(mesh.elements)
        self.elem_off = np.arange(ne) * layout.n_elem
        pos = ne * layout.n_elem
        self.face_off = {}
        for f in mesh.faces:
            if not f.is_boundary:
                self.face_off[f.id] = pos
                pos += layout.n_face
        self.n_vel = pos
        self.press_off = self.n_vel + np.arange(ne) * layout.n_pressure
        self.n_pressure = ne * layout.n_pressure
        self.n_dof = self.n_vel + self.n_pressure
        self.n_sys = self.n_dof + 1  # + zero-mean multiplier

    def element_indices(self, element):
        """(kept-local-dof mask, global velocity indices) for one element."""
        lay = self.layout
        keep = [np.arange(lay.n_elem)]
        gidx = [self.elem_off[element.id] + np.arange(lay.n_elem)]
        for pos, fid in enumerate(element.face_ids):
            if fid in self.face_off:
                keep.append(lay.n_elem + pos * lay.n_face + np.arange(lay.n_face))
                gidx.append(self.face_off[fid] + np.arange(lay.n_face))
        return np.concatenate(keep), np.concatenate(gidx)


class HHOSystem:
    """Mesh-level discretization: cached element operators and global blocks."""

    def __init__(self, mesh, k, quad_bump=0):
        self.mesh = mesh
        self.k = k
        self.layout = LocalDofLayout(k)
        self.dofmap = DofMap(mesh, self.layout)
        cache = OperatorCache(mesh, k, quad_bump)
        self.bound = []
        self.kmask = []
        self.gidx = []
        for e in mesh.elements:
            ops = cache.get(e)
            self.bound.append((ops, e.x_T - ops.x_T))
            km, gi = self.dofmap.element_indices(e)
            self.kmask.append(km)
            self.gidx.append(gi)
        log.info("built %d operator sets for %d elements",
                 cache.built, len(mesh.elements))
        self._assemble_invariant()
        self.convection = ConvectionAssembler(
            mesh, self.bound, self.gidx, self.kmask, self.dofmap.n_vel
        )
        self._build_data_batches()
        self._n1_solve = None

    def _build_data_batches(self):
        """Stacked quadrature points for vectorized field evaluation."""
        lay = self.layout
        self._elem_batches = []
        for g in self.convection.elem_groups:
            ops = g["ops"]
            offs = np.stack([self.bound[T][1] for T in g["elems"]])
            pts = (ops.elem_quad_data.points[None, :, :] + offs[:, None, :])
            rvald = np.concatenate(ops.Rval_data, axis=0)
            dof_x = np.stack([
                self.dofmap.elem_off[T] + np.arange(lay.n_elem_scalar)
                for T in g["elems"]
            ])
            self._elem_batches.append({
                "group": g,
                "pts": pts.reshape(-1, 2),
                "shape": pts.shape[:2],
                "wd": ops.elem_quad_data.weights,
                "rvald": rvald,
                "w_int": ops.W_int_elem,
                "dof_x": dof_x,
                "dof_y": dof_x + lay.n_elem_scalar,
            })
        face_groups = {}
        for f in self.mesh.faces:
            if f.is_boundary:
                continue
            t1 = f.elements[0]
            i1 = list(self.mesh.elements[t1].face_ids).index(f.id)
            key = (self.convection._group_key(t1), i1)
            face_groups.setdefault(key, []).append((t1, i1, f.id))
        self._face_batches = []
        for key in sorted(face_groups, key=lambda kk: face_groups[kk][0][2]):
            entries = face_groups[key]
            t1, i1, _ = entries[0]
            ops = self.bound[t1][0]
            offs = np.stack([self.bound[t][1] for t, _, _ in entries])
            pts = ops.face_qd[i1].points[None, :, :] + offs[:, None, :]
            dof_x = np.stack([
                self.dofmap.face_off[fid] + np.arange(lay.n_face_scalar)
                for _, _, fid in entries
            ])
            self._face_batches.append({
                "pts": pts.reshape(-1, 2),
                "shape": pts.shape[:2],
                "w_int": ops.W_int_face[i1],
                "dof_x": dof_x,
                "dof_y": dof_x + lay.n_face_scalar,
            })

    # -- time-invariant blocks ---------------------------------------------

    def _assemble_invariant(self):
        dm = self.dofmap
        rows_v, cols_v, mass_d, visc_d, n1_d = [], [], [], [], []
        rows_b, cols_b, b_d = [], [], []
        cvec = np.zeros(dm.n_pressure)
        for T, (ops, _) in enumerate(self.bound):
            km, gi = self.kmask[T], self.gidx[T]
            rows_v.append(np.repeat(gi, gi.size))
            cols_v.append(np.tile(gi, gi.size))
            sel = np.ix_(km, km)
            mass_d.append(unsteady_form(ops)[sel].ravel())
            visc_d.append(viscous_form(ops)[sel].ravel())
            n1_d.append(ops.N1[sel].ravel())
            pidx = dm.press_off[T] - dm.n_vel + np.arange(self.layout.n_pressure)
            rows_b.append(np.repeat(pidx, gi.size))
            cols_b.append(np.tile(gi, self.layout.n_pressure))
            b_d.append(coupling_form(ops)[:, km].ravel())
            cvec[pidx[0]] = np.sqrt(ops.area)
        shape_v = (dm.n_vel, dm.n_vel)
        rows_v = np.concatenate(rows_v)
        cols_v = np.concatenate(cols_v)
        self.M = sp.coo_matrix(
            (np.concatenate(mass_d), (rows_v, cols_v)), shape=shape_v).tocsr()
        self.A = sp.coo_matrix(
            (np.concatenate(visc_d), (rows_v, cols_v)), shape=shape_v).tocsr()
        self.N1h = sp.coo_matrix(
            (np.concatenate(n1_d), (rows_v, cols_v)), shape=shape_v).tocsr()
        self.B = sp.coo_matrix(
            (np.concatenate(b_d), (np.concatenate(rows_b), np.concatenate(cols_b))),
            shape=(dm.n_pressure, dm.n_vel)).tocsr()
        self.c = cvec

    def assemble_system(self, nu):
        """Time-invariant blocks of the discrete problem for viscosity nu."""
        return {"mass": self.M, "viscous": nu * self.A, "coupling": self.B,
                "mean_row": self.c, "n_dof": self.dofmap.n_dof}

    # -- fields and norms -----------------------------------------------------

    def interpolate(self, v):
        """Global interpolation of a vector field callable (n,2)->(n,2)."""
        out = np.zeros(self.dofmap.n_vel)
        for b in self._elem_batches:
            vals = np.asarray(v(b["pts"]), dtype=float).reshape(*b["shape"], 2)
            out[b["dof_x"]] = vals[:, :, 0] @ b["w_int"].T
            out[b["dof_y"]] = vals[:, :, 1] @ b["w_int"].T
        for b in self._face_batches:
            vals = np.asarray(v(b["pts"]), dtype=float).reshape(*b["shape"], 2)
            out[b["dof_x"]] = vals[:, :, 0] @ b["w_int"].T
            out[b["dof_y"]] = vals[:, :, 1] @ b["w_int"].T
        return out

    def body_force_vector(self, phi):
        """Load vector of l_h(phi, .), batched over congruence classes."""
        rhs = np.zeros(self.dofmap.n_vel)
        for b in self._elem_batches:
            g = b["group"]
            km = g["km"]
            vals = np.asarray(phi(b["pts"]), dtype=float).reshape(*b["shape"], 2)
            loc = np.einsum("q,eqc,qcl->el", b["wd"], vals, b["rvald"],
                            optimize=True)
            rhs += np.bincount(g["gi"].ravel(), weights=loc[:, km].ravel(),
                               minlength=self.dofmap.n_vel)
        return rhs

    def body_force_vector_reference(self, phi):
        return body_force(self.bound, self.gidx, self.kmask, self.dofmap.n_vel, phi)

    def local_velocity(self, u, T):
        loc = np.zeros(self.bound[T][0].n_loc)
        loc[self.kmask[T]] = u[self.gidx[T]]
        return loc

    def l2_elem(self, u):
        """Broken L2 norm of the element polynomial part of a velocity vector."""
        lay = self.layout
        ne = len(self.mesh.elements)
        return float(np.linalg.norm(u[: ne * lay.n_elem]))

    def norm_1h(self, u):
        return float(np.sqrt(max(u @ (self.N1h @ u), 0.0)))

    def dual_norm_1h(self, rhs):
        """Dual norm of a velocity functional w.r.t. the discrete H1 norm."""
        if self._n1_solve is None:
            self._n1_solve = spla.factorized(self.N1h.tocsc())
        x = self._n1_solve(rhs)
        return float(np.sqrt(max(rhs @ x, 0.0)))

    def divergence_l2(self, u):
        """Per-element L2 norms of D_T u (orthonormal pressure coefficients)."""
        bu = self.B @ u
        npr = self.layout.n_pressure
        return np.linalg.norm(bu.reshape(-1, npr), axis=1)

    def pressure_mean(self, p):
        return float(self.c @ p)

    def l2_pressure(self, p):
        return float(np.linalg.norm(p))


def project_div_free(system, v0):
    """Closest (in the unsteady norm) discretely divergence-free field to v0."""
    dm = system.dofmap
    c_col = sp.csr_matrix(
        (system.c, (np.arange(dm.n_pressure), np.zeros(dm.n_pressure, dtype=int))),
        shape=(dm.n_pressure, 1),
    )
    sad = sp.bmat(
        [[system.M, system.B.T, None],
         [-system.B, None, c_col],
         [None, c_col.T, None]],
        format="csc",
    )
    rhs = np.concatenate([system.M @ v0, np.zeros(dm.n_pressure), [0.0]])
    x = solve_linear(sad, rhs)
    return x[: dm.n_vel]


def solve_linear(matrix, rhs):
    """Direct sparse solve with a relative-residual guard."""
    lu = spla.splu(matrix.tocsc())
    x = lu.solve(rhs)
    scale = np.linalg.norm(rhs)
    resid = np.linalg.norm(matrix @ x - rhs)
    if not np.all(np.isfinite(x)) or resid > SOLVE_RTOL * max(scale, 1.0):
        raise LinearSolveFailure(
            f"linear solve residual {resid:.3e} (rhs scale {scale:.3e})"
        )
    return x


@dataclass
class TimeState:
    """Rolling BDF2 history: u at t and t - dt, pressure at t."""

    u: np.ndarray
    u_prev: np.ndarray
    p: np.ndarray
    t: float
    dt: float


def initialize(system, u_exact, t0, dt):
    """Interpolated two-level start: u at t0 and t0 + dt."""
    u0 = system.interpolate(lambda pts: u_exact(pts, t0))
    u1 = system.interpolate(lambda pts: u_exact(pts, t0 + dt))
    p = np.zeros(system.dofmap.n_pressure)
    return TimeState(u1, u0, p, t0 + dt, dt)


def step_bdf2(system, state, f, nu, convection=True, check=True):
    """Advance one IMEX-BDF2 step to t^n = state.t + dt.

    The convective transport is the extrapolation 2 u^{n-1} - u^{n-2}; the
    body force is evaluated at the implicit level t^n. Returns the new state
    (history shifted); raises if the linear solve leaves a residual, if the
    discrete divergence or pressure-mean invariants fail, or if the
    extrapolated transport is not discretely divergence-free.
    """
    dm = system.dofmap
    dt = state.dt
    t_new = state.t + dt
    K = (1.5 / dt) * system.M + nu * system.A
    ctx = None
    if convection:
        wstar = 2.0 * state.u - state.u_prev
        try:
            ctx = system.convection.context(wstar)
        except Exception as exc:
            raise ExtrapolantNotDivFree(str(exc)) from exc
        K = K + system.convection.matrix(ctx)
    rhs_u = system.body_force_vector(lambda pts: f(pts, t_new))
    rhs_u += system.M @ ((2.0 / dt) * state.u - (0.5 / dt) * state.u_prev)
    c_col = sp.csr_matrix(
        (system.c, (np.arange(dm.n_pressure), np.zeros(dm.n_pressure, dtype=int))),
        shape=(dm.n_pressure, 1),
    )
    full = sp.bmat(
        [
            [K, system.B.T, None],
            [-system.B, None, c_col],
            [None, c_col.T, None],
        ],
        format="csc",
    )
    rhs = np.concatenate([rhs_u, np.zeros(dm.n_pressure), [0.0]])
    x = solve_linear(full, rhs)
    u = x[: dm.n_vel]
    p = x[dm.n_vel: dm.n_vel + dm.n_pressure]
    if check:
        div = system.divergence_l2(u)
        if div.size and div.max() > DIV_STEP_TOL:
            raise LinearSolveFailure(f"max ||D_T u|| = {div.max():.3e} after step")
        pm = abs(system.pressure_mean(p))
        if pm > PRESSURE_MEAN_TOL * max(1.0, np.linalg.norm(p)):
            raise LinearSolveFailure(f"pressure mean {pm:.3e} after step")
    return TimeState(u, state.u, p, t_new, dt), ctx


CHECKPOINT_MAGIC = "hho-flow-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, state, k):
    """Text dump of the rolling state with a versioned header."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n")
        fh.write(f"{k} {float(state.t)!r} {float(state.dt)!r} "
                 f"{state.u.size} {state.p.size}\n")
        for arr in (state.u, state.u_prev, state.p):
            fh.write(" ".join(repr(float(v)) for v in arr) + "\n")


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if header[:1] != [CHECKPOINT_MAGIC] or int(header[1]) != CHECKPOINT_VERSION:
            raise LinearSolveFailure(f"not a checkpoint file: {path}")
        k, t, dt, nu_, np_ = fh.readline().split()
        u = np.array([float(v) for v in fh.readline().split()])
        u_prev = np.array([float(v) for v in fh.readline().split()])
        p = np.array([float(v) for v in fh.readline().split()])
    if u.size != int(nu_) or p.size != int(np_):
        raise LinearSolveFailure(f"checkpoint size mismatch in {path}")
    return TimeState(u, u_prev, p, float(t), float(dt)), int(k)


def sharp_norm_accumulate(system, ctx, e, nu):
    """One-step contribution to the energy-upwind error norm."""
    jump = system.convection.upwind_jump_sq(ctx, e) if ctx is not None else 0.0
    return nu * system.norm_1h(e) ** 2 + 0.5 * jump


def error_linf_l2(system, history):
    """Max over stored steps of the broken L2 norm of element error dofs."""
    return max(system.l2_elem(e) for e in history)


def error_sharp(system, contributions, dt):
    """Energy-upwind norm from per-step contributions (steps n >= 2)."""
    if len(contributions) < 1:
        raise InsufficientHistory("need at least one completed BDF2 step")
    return float(np.sqrt(dt * sum(contributions)))
