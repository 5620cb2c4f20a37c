import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from liverperf.errors import ContractError, FormatError, GeometryError
from liverperf.geometry import (
    CellField,
    Mesh,
    NodeField,
    cell_geometry,
    load_mesh,
    read_vtk_cell_data,
    read_vtk_geometry,
    save_mesh,
    write_vtk,
)
from liverperf.meshgen import box_mesh, ellipsoid_mesh

from conftest import unit_tet

CUBE6 = """mesh-v1
# unit cube, six tetrahedra around the main diagonal
8
0 0 0
1 0 0
0 1 0
1 1 0
0 0 1
1 0 1
0 1 1
1 1 1
6
0 1 3 7
0 1 5 7
0 2 3 7
0 2 6 7
0 4 5 7
0 4 6 7
"""


def write(tmp_path, text, name="m.mesh"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_single_tet_file_has_four_boundary_faces(tmp_path):
    p = write(tmp_path, "mesh-v1\n4\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n1\n0 1 2 3\n")
    m = load_mesh(p)
    assert m.n_cells == 1
    assert len(m.boundary_faces) == 4
    assert len(m.interior_faces[0]) == 0


def test_unit_cube_six_tets_volume(tmp_path):
    m = load_mesh(write(tmp_path, CUBE6))
    assert m.volumes.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(m.volumes > 0)


def test_cell_index_out_of_range_is_format_error(tmp_path):
    text = CUBE6.replace("0 4 6 7", "0 4 6 8")
    with pytest.raises(FormatError) as exc:
        load_mesh(write(tmp_path, text))
    assert exc.value.line == 18


@pytest.mark.parametrize(
    "text",
    [
        "mesh-v2\n0\n0\n",
        "mesh-v1\n4\n0 0 0\n1 0 0\n0 1\n0 0 1\n1\n0 1 2 3\n",
        "mesh-v1\n4\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n1\n0 1 2\n",
        "mesh-v1\n4\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n2\n0 1 2 3\n",
        "mesh-v1\nfour\n",
    ],
)
def test_malformed_files_raise_format_error(tmp_path, text):
    with pytest.raises(FormatError):
        load_mesh(write(tmp_path, text))


def test_flat_cell_is_geometry_error(tmp_path):
    text = "mesh-v1\n4\n0 0 0\n1 0 0\n0 1 0\n1 1 0\n1\n0 1 2 3\n"
    with pytest.raises(GeometryError):
        load_mesh(write(tmp_path, text))


def test_repeated_node_in_cell_rejected():
    with pytest.raises(GeometryError):
        Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], [[0, 1, 2, 2]])


def test_negative_orientation_is_repaired():
    m = Mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], [[0, 2, 1, 3]])
    assert m.volumes[0] == pytest.approx(1 / 6)
    assert sorted(m.cells[0]) == [0, 1, 2, 3]


def test_regular_tet_volume():
    s = 1 / np.sqrt(2)
    pts = [[1, 0, -s], [-1, 0, -s], [0, 1, s], [0, -1, s]]
    m = Mesh(np.array(pts) / 2, [[0, 1, 2, 3]])
    vol, _ = cell_geometry(m)
    assert vol[0] == pytest.approx(1 / (6 * np.sqrt(2)), rel=1e-12)
    assert vol[0] == pytest.approx(0.11785, abs=1e-5)


def test_barycenter_of_corner_tet():
    _, bc = cell_geometry(unit_tet())
    np.testing.assert_allclose(bc[0], [0.25, 0.25, 0.25])


def test_box_mesh_faces_and_volume():
    m = box_mesh(3)
    assert m.volumes.sum() == pytest.approx(1.0, abs=1e-12)
    # every cell has 4 faces: interior ones counted twice, boundary ones once
    assert 2 * len(m.interior_faces[0]) + len(m.boundary_faces) == 4 * m.n_cells
    # the outer surface of a 3x3x3 block grid has 6 * 9 squares, 2 triangles each
    assert len(m.boundary_faces) == 108


def test_boundary_faces_point_outward():
    m = box_mesh(2)
    p = m.nodes[m.boundary_faces]
    normal = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    centre = p.mean(axis=1) - 0.5
    assert np.all(np.einsum("ij,ij->i", normal, centre) > 0)


def test_interior_area_vectors_point_from_first_to_second_cell():
    m = box_mesh(2)
    pair, avec = m.interior_faces
    d = m.barycenters[pair[:, 1]] - m.barycenters[pair[:, 0]]
    assert np.all(np.einsum("ij,ij->i", avec, d) > 0)


def test_nonmanifold_mesh_rejected():
    nodes = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [0, 0, -1], [1, 1, 1]]
    with pytest.raises(GeometryError):
        Mesh(nodes, [[0, 1, 2, 3], [0, 1, 2, 4], [0, 1, 2, 5]])


def test_shape_gradients_reproduce_linear_field():
    m = box_mesh(2)
    p = 2 * m.nodes[:, 0] - m.nodes[:, 1] + 0.5 * m.nodes[:, 2]
    grad = np.einsum("cai,ca->ci", m.shape_gradients, p[m.cells])
    np.testing.assert_allclose(grad, np.tile([2.0, -1.0, 0.5], (m.n_cells, 1)), atol=1e-12)


def test_locate_and_nearest_cell():
    m = box_mesh(2)
    assert m.locate([[5.0, 5.0, 5.0]])[0] == -1
    c = m.nearest_cell([[0.1, 0.2, 0.3], [5.0, 5.0, 5.0]])
    assert c[0] == m.locate([[0.1, 0.2, 0.3]])[0]
    assert 0 <= c[1] < m.n_cells


def test_ellipsoid_mesh_inside_bounds():
    m = ellipsoid_mesh((0.1, 0.075, 0.05), 8)
    h = 2 * 0.1 / 8
    assert np.all(np.abs(m.nodes) <= np.array([0.1, 0.075, 0.05]) + h)
    exact = 4 / 3 * np.pi * 0.1 * 0.075 * 0.05
    assert m.volumes.sum() == pytest.approx(exact, rel=0.25)


def test_cellfield_contracts():
    with pytest.raises(ContractError):
        CellField("K", np.array([[[1.0, 2.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]]))
    with pytest.raises(ContractError):
        CellField("v", np.zeros((3, 2)))
    f = CellField("phi", np.zeros(3))
    with pytest.raises(ContractError):
        f.check(unit_tet())
    with pytest.raises(ContractError):
        NodeField("p", np.zeros(3)).check(unit_tet())
    assert f.kind == "scalar"
    # tensor symmetric within tolerance is accepted
    t = np.eye(3)[None] * 1.0
    t[0, 0, 1] = 1e-15
    CellField("K", t)


def test_vtk_one_cell_field(tmp_path):
    m = box_mesh(1)
    p = tmp_path / "a.vtk"
    write_vtk(m, [CellField("phi", np.arange(m.n_cells, dtype=float))], p)
    text = p.read_text()
    assert text.count("CELL_DATA") == 1
    assert "POINT_DATA" not in text
    assert "DATASET UNSTRUCTURED_GRID" in text
    assert read_vtk_cell_data(p)["phi"].tolist() == list(range(m.n_cells))


def test_vtk_geometry_only(tmp_path):
    m = box_mesh(1)
    p = tmp_path / "g.vtk"
    write_vtk(m, [], p)
    text = p.read_text()
    assert "CELL_DATA" not in text and "POINT_DATA" not in text
    assert f"CELL_TYPES {m.n_cells}" in text
    assert read_vtk_cell_data(p) == {}


def test_vtk_all_field_kinds_round_trip(tmp_path):
    m = box_mesh(1)
    rng = np.random.default_rng(0)
    K = rng.random((m.n_cells, 3, 3))
    K = K + K.transpose(0, 2, 1)
    fields = [
        CellField("S", rng.random(m.n_cells), 2),
        CellField("w", rng.random((m.n_cells, 3)), 1),
        CellField("K", K, 3),
        NodeField("p", rng.random(m.n_nodes), 1),
    ]
    p = tmp_path / "f.vtk"
    write_vtk(m, fields, p)
    data = read_vtk_cell_data(p)
    assert sorted(data) == ["K_3", "S_2", "w_1"]
    np.testing.assert_array_equal(data["S_2"], fields[0].values)
    np.testing.assert_array_equal(data["w_1"], fields[1].values)
    np.testing.assert_array_equal(data["K_3"], fields[2].values)
    assert "POINT_DATA 8" in p.read_text()


def test_vtk_size_mismatch(tmp_path):
    with pytest.raises(ContractError):
        write_vtk(box_mesh(1), [CellField("x", np.zeros(2))], tmp_path / "x.vtk")


def test_vtk_round_trip_coordinates(tmp_path):
    m = ellipsoid_mesh((0.1, 0.075, 0.05), 6)
    p = tmp_path / "e.vtk"
    write_vtk(m, [], p)
    nodes, cells = read_vtk_geometry(p)
    np.testing.assert_allclose(nodes, m.nodes, rtol=1e-6)
    np.testing.assert_array_equal(nodes, m.nodes)
    np.testing.assert_array_equal(cells, m.cells)


def test_mesh_file_round_trip(tmp_path):
    m = ellipsoid_mesh((0.1, 0.075, 0.05), 5)
    p = tmp_path / "e.mesh"
    save_mesh(m, p)
    m2 = load_mesh(p)
    np.testing.assert_array_equal(m2.nodes, m.nodes)
    np.testing.assert_array_equal(m2.cells, m.cells)


@settings(max_examples=25, deadline=None)
@given(st.randoms(use_true_random=False), st.integers(1, 3))
def test_volume_invariant_under_node_permutation(rnd, n):
    m = box_mesh(n)
    perm = list(range(m.n_nodes))
    rnd.shuffle(perm)
    perm = np.array(perm)
    inv = np.argsort(perm)
    nodes = m.nodes[perm]  # new node k is old node perm[k]
    cells = inv[m.cells]
    m2 = Mesh(nodes, cells)
    assert m2.volumes.sum() == pytest.approx(m.volumes.sum(), rel=1e-13)
    np.testing.assert_allclose(np.sort(m2.volumes), np.sort(m.volumes), rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(
    st.lists(st.floats(0.1, 10.0), min_size=3, max_size=3),
    st.lists(st.floats(-5.0, 5.0), min_size=3, max_size=3),
)
def test_box_volume_additivity(ext, lo):
    lo = np.array(lo)
    hi = lo + np.array(ext)
    m = box_mesh(2, lo, hi)
    assert m.volumes.sum() == pytest.approx(np.prod(ext), rel=1e-12)
    assert np.all(m.volumes > 0)
