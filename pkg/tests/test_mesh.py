import numpy as np
import pytest

from hho_flow import mesh as meshmod
from hho_flow.errors import ParseError, StarShapeError, TopologyError


def test_cartesian_counts():
    m = meshmod.generate_cartesian(2)
    assert (len(m.elements), len(m.faces), len(m.vertices)) == (4, 12, 9)
    assert m.h == pytest.approx(np.sqrt(2.0) / 2)


def test_cartesian_single_cell():
    m = meshmod.generate_cartesian(1)
    assert len(m.elements) == 1 and len(m.faces) == 4
    sub = m.elements[0].submesh
    assert len(sub.triangles) == 4
    assert len(sub.interior_sfaces) == 4


def test_cartesian_partition_of_unity():
    m = meshmod.generate_cartesian(4)
    assert sum(e.area for e in m.elements) == pytest.approx(1.0, abs=1e-12)


def test_interior_normals_opposite():
    m = meshmod.generate_cartesian(3)
    for f in m.faces:
        if not f.is_boundary:
            n1 = m.normal_out_of(f.elements[0], f)
            n2 = m.normal_out_of(f.elements[1], f)
            assert np.linalg.norm(n1 + n2) < 1e-14


def test_submesh_shares_star_center():
    m = meshmod.generate_hexagonal(1)
    for e in m.elements:
        for tri in e.submesh.triangles:
            assert np.linalg.norm(tri.vertices[0] - e.x_T) == 0.0
        assert sum(t.area for t in e.submesh.triangles) == pytest.approx(
            e.area, rel=1e-12)


def test_regularity_proxy_bounded():
    for level in (1, 2):
        m = meshmod.generate_hexagonal(level)
        info = meshmod.mesh_info(m)
        assert info["max_submesh_card"] <= 12
        assert info["max_face_card"] <= 12
    m = meshmod.generate_cartesian(8)
    assert meshmod.mesh_info(m)["max_submesh_card"] <= 12


def test_hexagonal_interior_cells_are_hexagons():
    m = meshmod.generate_hexagonal(1)
    interior = [e for e in m.elements
                if not any(fid in m.boundary_face_ids for fid in e.face_ids)]
    assert interior and all(len(e.vertex_ids) == 6 for e in interior)


def test_hexagonal_h_ratio():
    h1 = meshmod.generate_hexagonal(1).h
    h2 = meshmod.generate_hexagonal(2).h
    assert 0.4 <= h2 / h1 <= 0.6


def test_hexagonal_16_element_variant():
    m = meshmod.hexagonal_mesh(5, 3)
    assert len(m.elements) == 16


def test_submesh_of_triangle_element(tmp_path):
    path = tmp_path / "tri.txt"
    path.write_text("3 1 3\n0.0 0.0\n1.0 0.0\n0.0 1.0\n3 0 1 2\n", encoding="utf-8")
    m = meshmod.load_mesh(path)
    # the fan is applied even to simplices: 3 sub-triangles around the centroid
    assert len(m.elements[0].submesh.triangles) == 3


def test_load_mesh_valid(voronoi_like_path):
    m = meshmod.load_mesh(voronoi_like_path)
    assert len(m.elements) == 5
    assert len(m.faces) == 12
    assert sum(e.area for e in m.elements) == pytest.approx(1.0, abs=1e-12)


def test_load_mesh_four_elements(tmp_path):
    meshmod.write_poly_text(meshmod.generate_cartesian(2), tmp_path / "c2.txt")
    m = meshmod.load_mesh(tmp_path / "c2.txt")
    assert len(m.elements) == 4


def test_load_mesh_nonmanifold(tmp_path):
    path = tmp_path / "bad.txt"
    # three triangles all sharing the edge (0, 1)
    path.write_text(
        "5 3 7\n0 0\n1 0\n0.5 1\n0.5 -1\n1.5 0.5\n"
        "3 0 1 2\n3 0 3 1\n3 0 1 4\n", encoding="utf-8")
    with pytest.raises(TopologyError):
        meshmod.load_mesh(path)


def test_load_mesh_star_shape_failure(tmp_path):
    path = tmp_path / "ell.txt"
    # L-shaped element whose vertex mean lies outside the kernel
    path.write_text(
        "6 1 6\n0 0\n5 0\n5 1\n1 1\n1 5\n0 5\n6 0 1 2 3 4 5\n", encoding="utf-8")
    with pytest.raises(StarShapeError):
        meshmod.load_mesh(path)


def test_load_mesh_parse_errors(tmp_path):
    bad = tmp_path / "broken.txt"
    bad.write_text("2 1 1\n0 0\n1 0\n", encoding="utf-8")
    with pytest.raises(ParseError):
        meshmod.load_mesh(bad)
    with pytest.raises(ParseError):
        meshmod.load_mesh(tmp_path / "missing.txt")
    with pytest.raises(ParseError):
        meshmod.load_mesh(bad, format="exotic")


def test_face_count_header_checked(tmp_path):
    path = tmp_path / "hdr.txt"
    path.write_text("4 1 5\n0 0\n1 0\n1 1\n0 1\n4 0 1 2 3\n", encoding="utf-8")
    with pytest.raises(ParseError):
        meshmod.load_mesh(path)


def test_boundary_loop_area_guard():
    # every generated mesh tiles the boundary-enclosed area to 1e-12
    for m in (meshmod.generate_cartesian(3), meshmod.generate_hexagonal(1)):
        dom = meshmod._boundary_loop_area(m)
        assert sum(e.area for e in m.elements) == pytest.approx(dom, rel=1e-12)
