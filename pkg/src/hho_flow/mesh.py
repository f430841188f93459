"""Polygonal meshes of (0,1)^2: generators, poly-text ingestion, fan submeshes.

A mesh couples a collection of CCW polygonal elements with the set of their
faces; every element carries a matching simplicial submesh obtained by fanning
triangles from the star center x_T (arithmetic mean of the boundary vertices),
so that all triangles of an element share the vertex x_T.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, StarShapeError, TopologyError

AREA_RTOL = 1e-12
NORMAL_TOL = 1e-14


@dataclass(frozen=True)
class Simplex:
    """One triangle of a submesh; vertex 0 is always the star center x_T."""

    vertices: np.ndarray  # (3, 2)
    area: float
    diameter: float

    @property
    def centroid(self):
        return self.vertices.mean(axis=0)


@dataclass(frozen=True)
class SFace:
    """A simplicial face (segment) with its fixed unit normal and side ordering.

    ``tau1``/``tau2`` are local simplex indices within the owning element's
    submesh; ``n`` points out of tau1. Boundary simplicial faces (one per
    element face in a fan) store the owning mesh face id and tau2 = -1.
    """

    a: np.ndarray
    b: np.ndarray
    n: np.ndarray
    tau1: int
    tau2: int
    face_id: int = -1

    @property
    def length(self):
        return float(np.linalg.norm(self.b - self.a))

    @property
    def midpoint(self):
        return 0.5 * (self.a + self.b)


@dataclass(frozen=True)
class SubMesh:
    """Fan triangulation of one element; all triangles share x_T."""

    triangles: tuple
    interior_sfaces: tuple
    boundary_sfaces: dict  # face_id -> SFace


@dataclass(frozen=True)
class Element:
    id: int
    vertex_ids: tuple
    face_ids: tuple
    x_T: np.ndarray
    h_T: float
    area: float
    submesh: SubMesh


@dataclass(frozen=True)
class Face:
    """A mesh face (segment). ``normal`` points out of the lower-indexed element."""

    id: int
    v0: int
    v1: int
    elements: tuple  # one or two element ids, ascending
    a: np.ndarray
    b: np.ndarray
    normal: np.ndarray

    @property
    def length(self):
        return float(np.linalg.norm(self.b - self.a))

    @property
    def midpoint(self):
        return 0.5 * (self.a + self.b)

    @property
    def is_boundary(self):
        return len(self.elements) == 1


@dataclass(frozen=True)
class PolyMesh:
    vertices: np.ndarray
    elements: tuple
    faces: tuple
    boundary_face_ids: frozenset
    h: float

    def normal_out_of(self, elem_id, face):
        """Unit normal of ``face`` pointing out of element ``elem_id``."""
        sign = 1.0 if face.elements[0] == elem_id else -1.0
        return sign * face.normal

    def interior_faces(self):
        return [f for f in self.faces if not f.is_boundary]


def _polygon_area(pts):
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _diameter(pts):
    d = pts[:, None, :] - pts[None, :, :]
    return float(np.sqrt((d * d).sum(axis=2)).max())


def build_submesh(poly, x_T, face_ids):
    """Fan triangulation of a CCW polygon around the point x_T.

    Triangle i is (x_T, v_i, v_{i+1}); interior simplicial faces are the
    spokes [x_T, v_i], shared by triangles i-1 and i; each polygon face is a
    single boundary simplicial face of the fan.

    Raises
    ------
    StarShapeError
        If some fan triangle has non-positive signed area.
    """
    poly = np.asarray(poly, dtype=float)
    x_T = np.asarray(x_T, dtype=float)
    m = len(poly)
    tris = []
    for i in range(m):
        a, b = poly[i], poly[(i + 1) % m]
        signed = 0.5 * ((a[0] - x_T[0]) * (b[1] - x_T[1]) - (a[1] - x_T[1]) * (b[0] - x_T[0]))
        if signed <= 1e-14 * max(1.0, _diameter(poly) ** 2):
            raise StarShapeError(
                f"fan triangle {i} has non-positive area {signed:.3e}; "
                "element not star-shaped w.r.t. its center"
            )
        verts = np.array([x_T, a, b])
        tris.append(Simplex(verts, signed, _diameter(verts)))
    interior = []
    for i in range(m):
        # spoke [x_T, v_i] separates triangles (i-1) mod m and i
        t_prev, t_next = (i - 1) % m, i
        tau1, tau2 = (t_prev, t_next) if t_prev < t_next else (t_next, t_prev)
        d = poly[i] - x_T
        n = np.array([d[1], -d[0]]) / np.linalg.norm(d)
        # orient out of tau1: the centroid of tau2 lies on the +n side iff n
        # points from tau1 into tau2
        if np.dot(tris[tau2].centroid - x_T, n) < 0:
            n = -n
        interior.append(SFace(x_T.copy(), poly[i].copy(), n, tau1, tau2))
    boundary = {}
    for i in range(m):
        a, b = poly[i], poly[(i + 1) % m]
        d = b - a
        n = np.array([d[1], -d[0]]) / np.linalg.norm(d)  # outward for CCW loops
        boundary[face_ids[i]] = SFace(a.copy(), b.copy(), n, i, -1, face_ids[i])
    return SubMesh(tuple(tris), tuple(interior), boundary)


def _build_mesh(vertices, cells, context=""):
    """Assemble a PolyMesh from vertex coordinates and CCW cell vertex loops."""
    vertices = np.asarray(vertices, dtype=float)
    edge_map = {}  # sorted vertex pair -> face index
    incidence = []  # per face: list of element ids
    face_pairs = []  # per face: (v0, v1) as first registered
    cell_face_ids = []
    for ci, cell in enumerate(cells):
        pts = vertices[list(cell)]
        if _polygon_area(pts) <= 0:
            raise TopologyError(f"element {ci} is not counter-clockwise{context}")
        fids = []
        for i in range(len(cell)):
            a, b = cell[i], cell[(i + 1) % len(cell)]
            key = (min(a, b), max(a, b))
            if key not in edge_map:
                edge_map[key] = len(face_pairs)
                face_pairs.append((a, b))
                incidence.append([])
            fid = edge_map[key]
            if len(incidence[fid]) >= 2:
                raise TopologyError(
                    f"face {key} shared by more than two elements{context}"
                )
            incidence[fid].append(ci)
            fids.append(fid)
        cell_face_ids.append(tuple(fids))

    elements = []
    for ci, cell in enumerate(cells):
        pts = vertices[list(cell)]
        x_T = pts.mean(axis=0)
        submesh = build_submesh(pts, x_T, cell_face_ids[ci])
        elements.append(
            Element(ci, tuple(cell), cell_face_ids[ci], x_T, _diameter(pts),
                    _polygon_area(pts), submesh)
        )

    faces = []
    boundary_ids = set()
    for fid, (v0, v1) in enumerate(face_pairs):
        elems = tuple(sorted(incidence[fid]))
        a, b = vertices[v0], vertices[v1]
        owner = elements[elems[0]]
        n = owner.submesh.boundary_sfaces[fid].n
        faces.append(Face(fid, v0, v1, elems, a.copy(), b.copy(), n.copy()))
        if len(elems) == 1:
            boundary_ids.add(fid)

    mesh = PolyMesh(
        vertices,
        tuple(elements),
        tuple(faces),
        frozenset(boundary_ids),
        max(e.h_T for e in elements),
    )
    _validate(mesh, context)
    return mesh


def _boundary_loop_area(mesh):
    """Area enclosed by the boundary faces, oriented by their outward normals."""
    total = 0.0
    for fid in mesh.boundary_face_ids:
        f = mesh.faces[fid]
        mid = f.midpoint
        d = f.b - f.a
        # ensure (a -> b) runs CCW around the domain: outward normal must be
        # the right-hand rotation of the direction of travel
        if f.normal @ np.array([d[1], -d[0]]) < 0:
            d = -d
        total += 0.5 * (mid[0] * d[1] - mid[1] * d[0])
    return total


def _validate(mesh, context=""):
    dom = _boundary_loop_area(mesh)
    total = sum(e.area for e in mesh.elements)
    if abs(total - dom) > AREA_RTOL * abs(dom):
        raise TopologyError(
            f"element areas sum to {total!r}, boundary encloses {dom!r}{context}"
        )
    for e in mesh.elements:
        sub = sum(t.area for t in e.submesh.triangles)
        if abs(sub - e.area) > AREA_RTOL * e.area:
            raise TopologyError(f"submesh of element {e.id} does not tile it{context}")
    for f in mesh.faces:
        if not f.is_boundary:
            n1 = mesh.normal_out_of(f.elements[0], f)
            n2 = mesh.normal_out_of(f.elements[1], f)
            if np.linalg.norm(n1 + n2) > NORMAL_TOL:
                raise TopologyError(f"face {f.id} normals not opposite{context}")


def generate_cartesian(n):
    """Uniform n x n mesh of unit squares on (0,1)^2."""
    if n < 1:
        raise ValueError("n must be >= 1")
    xs = np.linspace(0.0, 1.0, n + 1)
    verts = np.array([[x, y] for y in xs for x in xs])
    vid = lambda i, j: j * (n + 1) + i
    cells = [
        (vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1))
        for j in range(n)
        for i in range(n)
    ]
    return _build_mesh(verts, cells, context=f" (cartesian n={n})")


def hexagonal_mesh(nx, ny):
    """Clipped pointy-top honeycomb with nx cells per aligned row and ny rows.

    ny must be odd and >= 3: rows 0 and ny-1 are aligned rows clipped to
    pentagons, odd rows are offset by half a cell and carry half-hexagon
    quads at the left/right boundary.
    """
    if nx < 2 or ny < 3 or ny % 2 == 0:
        raise ValueError("need nx >= 2 and odd ny >= 3")
    w = 1.0 / nx
    p = 1.0 / (ny - 1)
    a, b = p / 3.0, 2.0 * p / 3.0
    verts = []
    index = {}

    def vid(x, y):
        key = (round(x * 1e12), round(y * 1e12))
        if key not in index:
            index[key] = len(verts)
            verts.append((x, y))
        return index[key]

    cells = []
    for j in range(ny):
        c = j * p
        if j % 2 == 0:  # aligned row
            for i in range(nx):
                cx = (i + 0.5) * w
                lo, hi = cx - 0.5 * w, cx + 0.5 * w
                if j == 0:
                    pts = [(lo, 0.0), (hi, 0.0), (hi, b / 2), (cx, b / 2 + a), (lo, b / 2)]
                elif j == ny - 1:
                    pts = [(lo, 1 - b / 2), (cx, 1 - b / 2 - a), (hi, 1 - b / 2),
                           (hi, 1.0), (lo, 1.0)]
                else:
                    pts = [(cx, c - b / 2 - a), (hi, c - b / 2), (hi, c + b / 2),
                           (cx, c + b / 2 + a), (lo, c + b / 2), (lo, c - b / 2)]
                cells.append(tuple(vid(*q) for q in pts))
        else:  # offset row
            for i in range(nx + 1):
                cx = i * w
                if i == 0:
                    pts = [(0.0, c - b / 2 - a), (w / 2, c - b / 2), (w / 2, c + b / 2),
                           (0.0, c + b / 2 + a)]
                elif i == nx:
                    pts = [(1 - w / 2, c - b / 2), (1.0, c - b / 2 - a),
                           (1.0, c + b / 2 + a), (1 - w / 2, c + b / 2)]
                else:
                    pts = [(cx, c - b / 2 - a), (cx + w / 2, c - b / 2),
                           (cx + w / 2, c + b / 2), (cx, c + b / 2 + a),
                           (cx - w / 2, c + b / 2), (cx - w / 2, c - b / 2)]
                cells.append(tuple(vid(*q) for q in pts))
    return _build_mesh(np.array(verts), cells, context=f" (hexagonal {nx}x{ny})")


def generate_hexagonal(level):
    """Hexagon-dominant tiling of (0,1)^2; each level roughly halves cell size."""
    if level < 1:
        raise ValueError("level must be >= 1")
    nx = 4 * 2 ** (level - 1)
    return hexagonal_mesh(nx, nx + 1)


def load_mesh(path, format="poly-text"):
    """Read a PolyMesh from a file.

    The poly-text format is line oriented UTF-8: first `NV NE NF`, then NV
    vertex lines `x y`, then NE element lines `m v1 ... vm` with 0-based CCW
    vertex ids. Faces are derived from consecutive vertex pairs; `#` starts a
    comment. All mesh invariants are validated; loading fails loudly on
    malformed input, non-manifold faces, or non-star-shaped elements.
    """
    if format != "poly-text":
        raise ParseError(f"unknown mesh format {format!r}")
    try:
        with open(path, encoding="utf-8") as fh:
            tokens = []
            for line in fh:
                line = line.split("#", 1)[0].strip()
                if line:
                    tokens.append(line.split())
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    if not tokens:
        raise ParseError(f"{path}: empty mesh file")
    try:
        nv, ne, nf = (int(t) for t in tokens[0])
        rows = tokens[1:]
        if len(rows) != nv + ne:
            raise ValueError(f"expected {nv + ne} data lines, found {len(rows)}")
        verts = np.array([[float(r[0]), float(r[1])] for r in rows[:nv]])
        cells = []
        for r in rows[nv:]:
            m = int(r[0])
            if len(r) != m + 1:
                raise ValueError(f"element line {r} does not list {m} vertices")
            ids = [int(t) for t in r[1:]]
            if any(i < 0 or i >= nv for i in ids):
                raise ValueError(f"vertex id out of range in {r}")
            cells.append(tuple(ids))
    except (ValueError, IndexError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    mesh = _build_mesh(verts, cells, context=f" in {path}")
    if nf != len(mesh.faces):
        raise ParseError(
            f"{path}: header declares {nf} faces, derived {len(mesh.faces)}"
        )
    return mesh


def write_poly_text(mesh, path):
    """Write a mesh in the poly-text format accepted by load_mesh."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(mesh.vertices)} {len(mesh.elements)} {len(mesh.faces)}\n")
        for v in mesh.vertices:
            fh.write(f"{float(v[0])!r} {float(v[1])!r}\n")
        for e in mesh.elements:
            fh.write(" ".join([str(len(e.vertex_ids))] + [str(i) for i in e.vertex_ids]))
            fh.write("\n")


def mesh_info(mesh):
    """Summary dictionary used by the CLI."""
    cards = [len(e.submesh.triangles) for e in mesh.elements]
    return {
        "vertices": len(mesh.vertices),
        "elements": len(mesh.elements),
        "faces": len(mesh.faces),
        "boundary_faces": len(mesh.boundary_face_ids),
        "interior_faces": len(mesh.faces) - len(mesh.boundary_face_ids),
        "h": mesh.h,
        "max_submesh_card": max(cards),
        "max_face_card": max(len(e.face_ids) for e in mesh.elements),
        "total_area": sum(e.area for e in mesh.elements),
    }
