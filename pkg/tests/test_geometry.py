import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmrf_fusion.geometry import (
    Domain,
    Mesh,
    MeshError,
    OutOfMeshError,
    build_mesh,
    degrees_to_km,
    project,
    read_mesh,
    write_mesh,
)

SQUARE = Domain.rectangle(0, 0, 1, 1)


@pytest.fixture(scope="module")
def mesh():
    return build_mesh(Domain.rectangle(0, 0, 2, 1), 0.25, 0.3)


def test_coarse_square_covers_domain():
    m = build_mesh(SQUARE, 1.5)
    assert m.n_vertices >= 4
    assert np.all(project(m, [[0, 0], [1, 1], [0.5, 0.5]]).sum(axis=1) > 0.999)


def test_rectangle_positive_areas_cover_domain(mesh):
    assert np.all(mesh.areas > 0)
    assert mesh.areas.sum() >= 2.0


def test_refinement_increases_vertices():
    coarse = build_mesh(SQUARE, 0.4, 0.2)
    fine = build_mesh(SQUARE, 0.2, 0.2)
    assert fine.n_vertices > coarse.n_vertices


def test_interior_edges_bounded(mesh):
    e, d = mesh.edge_lengths()
    inside = mesh.interior[e[:, 0]] & mesh.interior[e[:, 1]]
    assert np.all(d[inside] <= 0.25 * (1 + 1e-9))


def test_no_duplicate_vertices(mesh):
    assert len(np.unique(np.round(mesh.vertices, 12), axis=0)) == mesh.n_vertices


def test_vertex_count_cap():
    with pytest.raises(MeshError):
        build_mesh(SQUARE, 0.001, max_vertices=1000)


@pytest.mark.parametrize(
    "boundary",
    [
        [[0, 0], [1, 1], [1, 0], [0, 1]],  # bow tie
        [[0, 0], [1, 0], [2, 0]],  # zero area
        [[0, 0], [1, 0]],
    ],
)
def test_degenerate_domain(boundary):
    with pytest.raises(MeshError):
        Domain(np.array(boundary, float))


def test_bad_edge_lengths():
    with pytest.raises(MeshError):
        build_mesh(SQUARE, 0.0)
    with pytest.raises(MeshError):
        build_mesh(SQUARE, 0.5, -1.0)


def test_vertex_projects_to_unit_row(mesh):
    i = 7
    P = project(mesh, mesh.vertices[[i]]).toarray()[0]
    assert P[i] == pytest.approx(1.0, abs=1e-12)
    assert np.sum(np.abs(P)) == pytest.approx(1.0, abs=1e-12)


def test_centroid_weights_are_thirds(mesh):
    tri = mesh.triangles[3]
    c = mesh.vertices[tri].mean(axis=0)
    P = project(mesh, [c]).toarray()[0]
    np.testing.assert_allclose(P[tri], 1 / 3, atol=1e-12)


def test_out_of_mesh_names_index(mesh):
    with pytest.raises(OutOfMeshError) as err:
        project(mesh, [[0.5, 0.5], [50.0, 50.0]])
    assert err.value.index == 1
    assert "point 1" in str(err.value)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 2), st.floats(0, 1)), min_size=1, max_size=30))
def test_projection_reproduces_coordinates(pts):
    m = _MESH
    pts = np.array(pts)
    P = project(m, pts)
    assert np.all(np.diff(P.indptr) <= 3)
    assert P.data.min() >= 0 and P.data.max() <= 1 + 1e-12
    np.testing.assert_allclose(np.asarray(P.sum(axis=1)).ravel(), 1.0, atol=1e-12)
    np.testing.assert_allclose(P @ m.vertices, pts, atol=1e-10)


_MESH = build_mesh(Domain.rectangle(0, 0, 2, 1), 0.3, 0.2)


def test_mesh_roundtrip(tmp_path, mesh):
    p = tmp_path / "mesh.txt"
    write_mesh(mesh, p)
    m2 = read_mesh(p)
    np.testing.assert_array_equal(m2.vertices, mesh.vertices)
    np.testing.assert_array_equal(m2.triangles, mesh.triangles)
    np.testing.assert_array_equal(m2.interior, mesh.interior)


def test_mesh_orients_triangles():
    v = np.array([[0, 0], [1, 0], [0, 1]], float)
    m = Mesh(v, np.array([[0, 2, 1]]))
    assert m.areas[0] > 0


def test_degrees_to_km():
    out = degrees_to_km(np.array([[1.0, 0.0], [0.0, 1.0]]), mean_latitude=0.0)
    np.testing.assert_allclose(out, [[111.32, 0.0], [0.0, 111.32]])
