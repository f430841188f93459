"""Manufactured-solution convergence studies: norms, EOCs, CSV emission.

The reference flow is a smooth, analytically divergence-free field vanishing
on the boundary of the unit square, modulated in time; the forcing is
assembled from hand-derived derivatives and cross-checked against finite
differences in the test suite.
"""

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import mesh as meshmod
from .errors import ConfigError
from .solver import (HHOSystem, error_sharp, initialize, project_div_free,
                     sharp_norm_accumulate, step_bdf2)

log = logging.getLogger(__name__)

CSV_COLUMNS = ["family", "nu", "ndof", "h", "err_linf_l2", "eoc_linf_l2",
               "err_sharp", "eoc_sharp", "wall_seconds"]


class ManufacturedSolution:
    """Closed-form reference solution on (0,1)^2 with zero wall velocity."""

    def __init__(self, nu):
        self.nu = nu

    @staticmethod
    def _g(t):
        return (6.0 + 4.0 * np.cos(4.0 * t)) / 10.0

    @staticmethod
    def _gp(t):
        return -1.6 * np.sin(4.0 * t)

    @staticmethod
    def _parts(pts):
        x, y = pts[:, 0], pts[:, 1]
        pi = np.pi
        return {
            "s1": np.sin(pi * x), "c1": np.cos(pi * x),
            "s2": np.sin(2 * pi * x), "c2": np.cos(2 * pi * x),
            "q": y * (1.0 - y), "qp": 1.0 - 2.0 * y, "y": y,
        }

    def u(self, pts, t):
        g = self._g(t)
        z = self._parts(np.asarray(pts, dtype=float))
        u1 = 16.0 * g * z["s1"] ** 2 * z["q"] * z["qp"]
        u2 = -8.0 * np.pi * g * z["s2"] * z["q"] ** 2
        return np.stack([u1, u2], axis=1)

    def p(self, pts, t):
        pts = np.asarray(pts, dtype=float)
        return self._g(t) * np.sin(np.pi * pts[:, 0]) * np.cos(np.pi * pts[:, 1])

    def grad_u(self, pts, t):
        """Velocity gradient entries (n, comp, deriv)."""
        g = self._g(t)
        z = self._parts(np.asarray(pts, dtype=float))
        pi = np.pi
        out = np.empty((pts.shape[0], 2, 2))
        out[:, 0, 0] = 16.0 * pi * g * z["s2"] * z["q"] * z["qp"]
        out[:, 0, 1] = 16.0 * g * z["s1"] ** 2 * (z["qp"] ** 2 - 2.0 * z["q"])
        out[:, 1, 0] = -16.0 * pi**2 * g * z["c2"] * z["q"] ** 2
        out[:, 1, 1] = -16.0 * pi * g * z["s2"] * z["q"] * z["qp"]
        return out

    def laplacian_u(self, pts, t):
        g = self._g(t)
        z = self._parts(np.asarray(pts, dtype=float))
        pi = np.pi
        l1 = 32.0 * pi**2 * g * z["c2"] * z["q"] * z["qp"] \
            - 96.0 * g * z["s1"] ** 2 * z["qp"]
        l2 = 32.0 * pi**3 * g * z["s2"] * z["q"] ** 2 \
            - 16.0 * pi * g * z["s2"] * (z["qp"] ** 2 - 2.0 * z["q"])
        return np.stack([l1, l2], axis=1)

    def grad_p(self, pts, t):
        pts = np.asarray(pts, dtype=float)
        g = self._g(t)
        pi = np.pi
        gx = g * pi * np.cos(pi * pts[:, 0]) * np.cos(pi * pts[:, 1])
        gy = -g * pi * np.sin(pi * pts[:, 0]) * np.sin(pi * pts[:, 1])
        return np.stack([gx, gy], axis=1)

    def u_t(self, pts, t):
        return (self._gp(t) / self._g(t)) * self.u(pts, t)

    def f(self, pts, t):
        """Forcing u_t - nu lap(u) + (u . grad) u + grad p."""
        uu = self.u(pts, t)
        gu = self.grad_u(pts, t)
        conv = np.einsum("nd,ncd->nc", uu, gu)
        return self.u_t(pts, t) - self.nu * self.laplacian_u(pts, t) + conv \
            + self.grad_p(pts, t)


def manufactured_eval(ms, pts, t):
    """(u, p, f) of the reference solution at given points and time."""
    pts = np.asarray(pts, dtype=float)
    return ms.u(pts, t), ms.p(pts, t), ms.f(pts, t)


def eoc(e_coarse, e_fine, h_coarse, h_fine):
    """Estimated order of convergence between two refinements."""
    return float(np.log(e_coarse / e_fine) / np.log(h_coarse / h_fine))


def interpolation_error_l2(system, u_fn):
    """Broken L2 distance between a field and its elementwise projection.

    Computed by direct quadrature of |u - pi u|^2; the Pythagoras route
    (norm difference of u and its coefficients) is exposed for cross-checks.
    """
    udofs = system.interpolate(u_fn)
    total = 0.0
    for T, (ops, offset) in enumerate(system.bound):
        loc = system.local_velocity(udofs, T)
        cx = loc[ops.sl_elem_x]
        cy = loc[ops.sl_elem_y]
        qd = ops.elem_quad_data
        vals = np.asarray(u_fn(qd.points + offset), dtype=float)
        ev = ops.elem_sb.eval(qd.points, dim=ops.layout.n_elem_scalar)
        diff = vals - np.stack([ev @ cx, ev @ cy], axis=1)
        total += float(qd.weights @ (diff**2).sum(axis=1))
    return float(np.sqrt(total))


def interpolation_error_l2_pythagoras(system, u_fn):
    udofs = system.interpolate(u_fn)
    total = 0.0
    for T, (ops, offset) in enumerate(system.bound):
        loc = system.local_velocity(udofs, T)
        qd = ops.elem_quad_data
        vals = np.asarray(u_fn(qd.points + offset), dtype=float)
        usq = float(qd.weights @ (vals**2).sum(axis=1))
        csq = float(np.sum(loc[ops.sl_elem_x] ** 2) + np.sum(loc[ops.sl_elem_y] ** 2))
        total += max(usq - csq, 0.0)
    return float(np.sqrt(total))


@dataclass
class ErrorReport:
    """Per-run record of a convergence study."""

    family: str
    nu: float
    ndof: int
    h: float
    err_linf_l2: float = np.nan
    err_sharp: float = np.nan
    eoc_linf_l2: float = np.nan
    eoc_sharp: float = np.nan
    wall_seconds: float = np.nan
    status: str = "ok"


@dataclass
class StudyConfig:
    family: str
    mesh_files: list
    k: int
    nu_list: list
    dt: float
    t_final: float
    quad_bump: int = 0
    condense: bool = False
    out_dir: str = "."


_REQUIRED_KEYS = ("family", "mesh_files", "k", "nu_list", "dt", "t_final")
_KNOWN_KEYS = _REQUIRED_KEYS + ("quad_bump", "condense", "out_dir")


def parse_config(path):
    """Read the flat key = value study configuration."""
    raw = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _KNOWN_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        raw[key] = value
    missing = [k for k in _REQUIRED_KEYS if k not in raw]
    if missing:
        raise ConfigError(f"{path}: missing keys {missing}")
    family = raw["family"].lower()
    if family not in ("cartesian", "hexagonal", "voronoi"):
        raise ConfigError(f"unknown mesh family {family!r}")
    mesh_files = raw["mesh_files"].replace(",", " ").split()
    if not mesh_files:
        raise ConfigError("mesh_files is empty: nothing to run")
    try:
        cfg = StudyConfig(
            family=family,
            mesh_files=mesh_files,
            k=int(raw["k"]),
            nu_list=[float(v) for v in raw["nu_list"].replace(",", " ").split()],
            dt=float(raw["dt"]),
            t_final=float(raw["t_final"]),
            quad_bump=int(raw.get("quad_bump", "0")),
            condense=raw.get("condense", "false").lower() in ("1", "true", "yes"),
            out_dir=raw.get("out_dir", "."),
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not cfg.nu_list:
        raise ConfigError("nu_list is empty")
    if cfg.dt <= 0 or cfg.t_final < 2 * cfg.dt:
        raise ConfigError("need dt > 0 and t_final >= 2*dt")
    if cfg.k < 0:
        raise ConfigError("k must be >= 0")
    return cfg


def build_mesh(family, spec):
    if family == "cartesian":
        return meshmod.generate_cartesian(int(spec))
    if family == "hexagonal":
        return meshmod.generate_hexagonal(int(spec))
    return meshmod.load_mesh(spec)


def run_single(system, nu, dt, t_final):
    """One manufactured-solution run; returns both error norms."""
    ms = ManufacturedSolution(nu)
    state = initialize(system, ms.u, 0.0, dt)
    n_steps = int(round(t_final / dt))
    err_max = 0.0  # levels 0 and 1 are interpolates: zero error
    sharp_contribs = []
    for _ in range(2, n_steps + 1):
        state, ctx = step_bdf2(system, state, ms.f, nu)
        e = state.u - system.interpolate(lambda pts: ms.u(pts, state.t))
        err_max = max(err_max, system.l2_elem(e))
        sharp_contribs.append(sharp_norm_accumulate(system, ctx, e, nu))
    return err_max, error_sharp(system, sharp_contribs, dt)


def run_convergence_study(config):
    """Run the full (family, nu, mesh) grid and emit errors.csv plus a table.

    Failures abort the affected run only; the report row keeps the failure
    status and is excluded from the CSV.
    """
    if config.condense:
        log.warning("static condensation is not available; running uncondensed")
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meshes = [build_mesh(config.family, s) for s in config.mesh_files]
    systems = [HHOSystem(m, config.k, config.quad_bump) for m in meshes]
    reports = []
    for nu in config.nu_list:
        prev = None
        for m, system in zip(meshes, systems):
            rep = ErrorReport(config.family, nu, system.dofmap.n_dof, m.h)
            t0 = time.perf_counter()
            try:
                rep.err_linf_l2, rep.err_sharp = run_single(
                    system, nu, config.dt, config.t_final
                )
            except Exception as exc:  # propagate nothing: record and continue
                rep.status = f"failed: {exc}"
                log.error("run failed (family=%s nu=%g h=%g): %s",
                          config.family, nu, m.h, exc)
                reports.append(rep)
                prev = None
                continue
            rep.wall_seconds = time.perf_counter() - t0
            if prev is not None:
                rep.eoc_linf_l2 = eoc(prev.err_linf_l2, rep.err_linf_l2, prev.h, rep.h)
                rep.eoc_sharp = eoc(prev.err_sharp, rep.err_sharp, prev.h, rep.h)
            reports.append(rep)
            prev = rep
    write_csv(out_dir / "errors.csv", reports)
    print(format_table(reports))
    return reports


def _fmt(value):
    if isinstance(value, float):
        return "" if np.isnan(value) else repr(value)
    return str(value)


def write_csv(path, reports):
    lines = [",".join(CSV_COLUMNS)]
    for r in reports:
        if r.status != "ok":
            continue
        lines.append(",".join(_fmt(getattr(r, col)) for col in CSV_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def verify():
    """Quick operator property suite; prints one PASS/FAIL line per check."""
    from .quadrature import triangle_rule
    from .reconstruct import OperatorCache

    rng = np.random.default_rng(2024)
    checks = []

    def check(name, resid, tol):
        ok = resid <= tol
        checks.append(ok)
        print(f"{'PASS' if ok else 'FAIL'}  {name}: residual {resid:.2e} "
              f"(tol {tol:.0e})")

    tri = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    q = triangle_rule(2, tri)
    check("quadrature int(xy) on unit triangle", abs(q.integrate(
        q.points[:, 0] * q.points[:, 1]) - 1.0 / 24.0) * 24.0, 1e-14)

    m = meshmod.generate_hexagonal(1)
    hexel = next(e for e in m.elements if len(e.vertex_ids) == 6)
    ops = OperatorCache(m, 1).get(hexel)

    v = ops.interpolate(lambda p: np.stack([p[:, 0] ** 2, p[:, 0] * p[:, 1]], axis=1))
    pts, w = ops.elem_quad.points, ops.elem_quad.weights
    ref = (w * (3.0 * pts[:, 0])) @ ops.elem_sb.eval(pts, dim=ops.layout.n_pressure)
    check("divergence commutation", float(np.abs(ops.D @ v - ref).max()), 1e-10)

    qf = lambda p: np.stack([0.2 + p[:, 0] - 0.5 * p[:, 1],
                             -0.4 + 2.0 * p[:, 0] + p[:, 1]], axis=1)
    vq = ops.interpolate(qf)
    worst = max(
        float(np.abs(np.einsum("qcl,l->qc", ops.Rval[t], vq)
                     - qf(ops.vol_q[t].points)).max())
        for t in range(ops.m)
    )
    check("reconstruction polynomial consistency", worst, 1e-10)

    pot = ops.pot
    qp = pot.from_callable(lambda p: np.stack(
        [0.7 * np.ones(len(p)), 0.1 * np.ones(len(p))], axis=1))
    g = pot.grad_apply(qp)
    check("potential gradient identity", float(np.abs(g.coeffs - qp.coeffs).max()),
          1e-10)

    rnd = pot.from_callable(lambda p: np.stack(
        [rng.standard_normal() + 0.0 * p[:, 0],
         rng.standard_normal() + 0.0 * p[:, 0]], axis=1))
    bpart = pot.gamma.apply(pot.gamma.projG, rnd)
    cpart = pot.gamma.apply(pot.gamma.projGc, rnd)
    rec = pot.gamma.recover(bpart, cpart)
    check("recovery operator identity", float(np.abs(rec.coeffs - rnd.coeffs).max()),
          1e-10)

    sysc = HHOSystem(meshmod.generate_cartesian(2), 1)
    wdofs = project_div_free(sysc, rng.standard_normal(sysc.dofmap.n_vel))
    ctx = sysc.convection.context(wdofs)
    z = rng.standard_normal(sysc.dofmap.n_vel)
    tvv = sysc.convection.trilinear(ctx, z, z)
    up, pen = sysc.convection.dissipation_parts(ctx, z)
    check("convective dissipativity split",
          abs(tvv - (up + pen)) / max(abs(tvv), 1.0), 1e-9)

    ms = ManufacturedSolution(1e-3)
    pts = rng.random((20, 2))
    ts = rng.random(20)
    worst = 0.0
    for t in ts[:3]:
        fd = _forcing_finite_difference(ms, pts, t)
        fa = ms.f(pts, t)
        worst = max(worst, float(np.abs(fa - fd).max() / np.abs(fa).max()))
    check("forcing finite-difference oracle", worst, 1e-6)

    return all(checks)


def _forcing_finite_difference(ms, pts, t, h=1e-5):
    """Forcing recomputed from u and p by centered differences."""
    ex = np.array([h, 0.0])
    ey = np.array([0.0, h])
    u0 = ms.u(pts, t)
    du_dt = (ms.u(pts, t + h) - ms.u(pts, t - h)) / (2 * h)
    lap = (ms.u(pts + ex, t) + ms.u(pts - ex, t) + ms.u(pts + ey, t)
           + ms.u(pts - ey, t) - 4.0 * u0) / h**2
    gx = (ms.u(pts + ex, t) - ms.u(pts - ex, t)) / (2 * h)
    gy = (ms.u(pts + ey, t) - ms.u(pts - ey, t)) / (2 * h)
    conv = u0[:, :1] * gx + u0[:, 1:2] * gy
    gp = np.stack([
        (ms.p(pts + ex, t) - ms.p(pts - ex, t)) / (2 * h),
        (ms.p(pts + ey, t) - ms.p(pts - ey, t)) / (2 * h),
    ], axis=1)
    return du_dt - ms.nu * lap + conv + gp


def format_table(reports):
    """Aligned text mirror of the CSV, grouped like the paper's tables."""
    header = f"{'family':<10} {'nu':>8} {'ndof':>8} {'h':>10} " \
             f"{'err_L2':>12} {'eoc':>6} {'err_sharp':>12} {'eoc':>6} {'wall[s]':>8}"
    rows = [header, "-" * len(header)]
    for r in reports:
        if r.status != "ok":
            rows.append(f"{r.family:<10} {r.nu:>8.1e} {r.ndof:>8} {r.h:>10.4f} "
                        f"{r.status}")
            continue
        e1 = f"{r.eoc_linf_l2:.2f}" if not np.isnan(r.eoc_linf_l2) else "--"
        e2 = f"{r.eoc_sharp:.2f}" if not np.isnan(r.eoc_sharp) else "--"
        rows.append(
            f"{r.family:<10} {r.nu:>8.1e} {r.ndof:>8} {r.h:>10.4f} "
            f"{r.err_linf_l2:>12.4e} {e1:>6} {r.err_sharp:>12.4e} {e2:>6} "
            f"{r.wall_seconds:>8.1f}"
        )
    return "\n".join(rows)
