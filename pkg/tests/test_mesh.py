import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csahomog.fem import Discretization, SparsePattern
from csahomog.mesh import (ElementInversionError, Mesh, MeshError, build_quadrature, displace,
                           format_mesh, load_mesh, match_periodic, parse_mesh, shape_functions,
                           shape_gradients, write_mesh)

from conftest import DATA, periodic_cell

TWO_TRI = """nodes 4
0 0.0 0.0
1 1.0 0.0
2 1.0 1.0
3 0.0 1.0
elements 2
0 tri3 0 1 2 1
1 tri3 0 2 3 2
facets 1
0 0 1 5
"""


@pytest.mark.parametrize("kind, measure", [("tri3", 0.5), ("quad4", 4.0)])
def test_quadrature_weights(kind, measure):
    rule = build_quadrature(kind)
    assert np.all(rule.weights > 0)
    assert rule.weights.sum() == pytest.approx(measure, rel=1e-15)


@pytest.mark.parametrize("kind", ["tri3", "quad4"])
def test_quadrature_integrates_quadratics(kind):
    rule = build_quadrature(kind)
    x, y = rule.points.T
    if kind == "tri3":
        assert rule.weights @ (x * x) == pytest.approx(1 / 12)
        assert rule.weights @ (x * y) == pytest.approx(1 / 24)
    else:
        assert rule.weights @ (x * x * y * y) == pytest.approx(4 / 9)


@pytest.mark.parametrize("kind", ["tri3", "quad4"])
def test_shape_functions_partition_of_unity(kind):
    xi = np.random.default_rng(0).uniform(0, 0.5, (7, 2))
    N, dN = shape_functions(kind, xi)
    np.testing.assert_allclose(N.sum(axis=1), 1.0, rtol=1e-14)
    np.testing.assert_allclose(dN.sum(axis=1), 0.0, atol=1e-14)


def test_unknown_kind_rejected():
    with pytest.raises((MeshError, KeyError, ValueError)):
        build_quadrature("hex8")


def test_parse_roundtrip_and_checksum(tmp_path):
    mesh = parse_mesh(TWO_TRI)
    assert mesh.n_nodes == 4 and mesh.n_elements == 2
    assert list(mesh.regions) == [1, 2]
    assert mesh.facet_tags.tolist() == [5]
    write_mesh(mesh, tmp_path / "m.mesh")
    again = load_mesh(tmp_path / "m.mesh")
    assert again.checksum() == mesh.checksum()
    np.testing.assert_array_equal(again.nodes, mesh.nodes)


def test_parse_error_reports_line_number():
    bad = TWO_TRI.replace("1 tri3 0 2 3 2", "1 tri3 0 2 7 2")
    with pytest.raises(MeshError, match=r":8: element 1 references node 7 of 4"):
        parse_mesh(bad)


def test_unknown_element_kind():
    with pytest.raises(MeshError, match="unknown element kind 'tet4'"):
        parse_mesh(TWO_TRI.replace("0 tri3 0 1 2 1", "0 tet4 0 1 2 1"))


def test_inverted_element_reported_by_index():
    with pytest.raises(MeshError, match="element 1 has nonpositive Jacobian"):
        parse_mesh(TWO_TRI.replace("1 tri3 0 2 3 2", "1 tri3 0 3 2 2"))


def test_out_of_sequence_id():
    with pytest.raises(MeshError, match="out of sequence"):
        parse_mesh(TWO_TRI.replace("3 0.0 1.0", "4 0.0 1.0"))


def test_shape_gradients_linear_field_exact():
    mesh = load_mesh(DATA / "lshape_8.mesh")
    u = mesh.nodes @ np.array([2.0, -3.0]) + 1.0
    for e in range(mesh.n_elements):
        dN, det = shape_gradients(mesh, e, [0.3, -0.2])
        assert det > 0
        np.testing.assert_allclose(u[mesh.element_nodes(e)] @ dN, [2.0, -3.0], rtol=1e-12)


def test_displace_detects_inversion():
    mesh = parse_mesh(TWO_TRI)
    u = np.zeros((4, 2))
    u[2] = [-2.0, -2.0]
    with pytest.raises(ElementInversionError):
        displace(mesh, u)


def test_discretization_area_and_gradients():
    mesh = load_mesh(DATA / "cell_81.mesh")
    for collapse in (False, True):
        disc = Discretization(mesh, collapse_affine=collapse)
        area = sum(b.wdet0.sum() for b in disc.blocks)
        assert area == pytest.approx(1.0, rel=1e-13)
        G = np.array([[0.1, 0.2], [-0.3, 0.05]])
        F = disc.deformation_gradients(mesh.nodes @ (np.eye(2) + G).T)
        for f in F:
            np.testing.assert_allclose(f, np.broadcast_to(np.eye(2) + G, f.shape), atol=1e-13)


def test_sparse_pattern_matches_dense_assembly():
    rng = np.random.default_rng(0)
    eqs = [np.array([[0, 1, -1], [1, 2, 3]]), np.array([[3, 0]])]
    Ke = [rng.standard_normal((2, 3, 3)), rng.standard_normal((1, 2, 2))]
    dense = np.zeros((4, 4))
    for E, k in zip(eqs, Ke):
        for e in range(len(E)):
            for a, i in enumerate(E[e]):
                for b, j in enumerate(E[e]):
                    if i >= 0 and j >= 0:
                        dense[i, j] += k[e, a, b]
    pat = SparsePattern(eqs, 4)
    np.testing.assert_allclose(pat.matrix(Ke).toarray(), dense, rtol=1e-14)
    fe = [rng.standard_normal((2, 2, 3)), rng.standard_normal((2, 1, 2))]
    v = pat.vector(fe)
    assert v.shape == (2, 4)


@pytest.mark.parametrize("name", ["cell_81.mesh", "cell_484.mesh", "cell_961.mesh",
                                  "cell_2160.mesh"])
def test_bundled_cells_pair_periodically(name):
    cell = match_periodic(load_mesh(DATA / name))
    X = cell.mesh.nodes
    for m, s in cell.pairings:
        d = X[s // 2] - X[m // 2]
        k = np.round(d / cell.period)
        assert np.abs(d - k * cell.period).max() < 1e-8
        assert np.count_nonzero(k) >= 1
    assert np.count_nonzero(cell.master == cell.anchor) == 4
    assert cell.n_reduced == 2 * len(np.unique(cell.master)) - 2


def test_fine_cell_counts():
    mesh = load_mesh(DATA / "cell_2160.mesh")
    assert (mesh.n_nodes, mesh.n_elements) == (2160, 4166)


def test_unmatched_boundary_node():
    mesh = periodic_cell(4)
    nodes = mesh.nodes.copy()
    nodes[1, 1] = 0.0
    k = int(np.flatnonzero((np.abs(nodes[:, 0] - 0.25) < 1e-12) & (nodes[:, 1] == 1.0))[0])
    nodes[k, 0] = 0.26
    with pytest.raises(MeshError, match="unmatched boundary node"):
        match_periodic(mesh.with_nodes(nodes))


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 9))
def test_expand_restrict_roundtrip(n):
    cell = match_periodic(periodic_cell(n))
    x = np.random.default_rng(n).standard_normal(cell.n_reduced)
    u = cell.expand(x)
    np.testing.assert_array_equal(cell.restrict(u), x)
    assert np.all(u[cell.anchor] == 0)
    for m, s in cell.pairings:
        assert u.reshape(-1)[m] == u.reshape(-1)[s]


def test_region_tags_partition_elements():
    mesh = load_mesh(DATA / "cell_961.mesh")
    assert len(mesh.regions) == mesh.n_elements
    assert set(np.unique(mesh.regions)) == {1, 2}


def test_format_uses_exact_floats():
    mesh = Mesh(np.array([[0.1, 1 / 3], [1.0, 0.0], [0.0, 1.0]]),
                np.array([[0, 1, 2, -1]]), ("tri3",), np.array([1]))
    assert parse_mesh(format_mesh(mesh)).nodes[0, 1] == 1 / 3
