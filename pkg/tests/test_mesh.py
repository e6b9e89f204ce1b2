import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridns.mesh import (MeshError, build_structured_mesh, face_topology, from_arrays,
                           read_mesh, write_mesh)


def test_single_cell_counts():
    m = build_structured_mesh(1)
    assert m.n_elements == 2
    assert m.n_faces == 5
    assert len(m.boundary_faces) == 4


def test_diameter_n2():
    m = build_structured_mesh(2)
    assert m.n_elements == 8
    assert m.h == pytest.approx(math.sqrt(2) / 2, abs=1e-15)


def test_crisscross_area():
    m = build_structured_mesh(4, "crisscross")
    assert m.n_elements == 64
    assert abs(m.areas.sum() - 1.0) < 1e-14


def test_rejects_bad_input():
    with pytest.raises(MeshError):
        build_structured_mesh(0)
    with pytest.raises(MeshError):
        build_structured_mesh(2, "hexagonal")
    with pytest.raises(MeshError):
        from_arrays([[0, 0], [1, 0], [2, 0]], [[0, 1, 2]])


def test_non_manifold_face_rejected():
    tris = [[0, 1, 2], [0, 1, 3], [0, 1, 4]]
    with pytest.raises(MeshError):
        face_topology(np.array(tris))


def test_reference_triangle_geometry():
    m = from_arrays([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]])
    # local face 1 joins (1,0) and (0,1)
    np.testing.assert_allclose(m.normals[0, 1], [1 / math.sqrt(2), 1 / math.sqrt(2)], atol=1e-15)
    # bottom face y = 0 is local face 0
    assert m.face_distances[0, 0] == pytest.approx(1 / 3, abs=1e-15)


def test_clockwise_input_is_reoriented():
    m = from_arrays([[0, 0], [0, 1], [1, 0]], [[0, 1, 2]])
    p = m.vertices[m.triangles[0]]
    e1, e2 = p[1] - p[0], p[2] - p[0]
    assert e1[0] * e2[1] - e1[1] * e2[0] > 0


@pytest.mark.parametrize("pattern", ["diagonal", "crisscross"])
@pytest.mark.parametrize("n", [1, 3, 8])
def test_mesh_invariants(n, pattern):
    m = build_structured_mesh(n, pattern)
    counts = (m.face_elements >= 0).sum(axis=1)
    assert np.all(counts[m.is_boundary_face] == 1)
    assert np.all(counts[~m.is_boundary_face] == 2)
    assert np.all(m.areas > 0)
    assert m.h == m.diameters.max()
    # divergence theorem identity sum_F d_TF |F| = 2 |T|
    lengths = m.face_lengths[m.element_faces]
    np.testing.assert_allclose((m.face_distances * lengths).sum(axis=1), 2 * m.areas, rtol=1e-13)
    assert np.all(m.face_distances > 0)
    np.testing.assert_allclose(np.linalg.norm(m.normals, axis=2), 1.0, atol=1e-15)


@pytest.mark.parametrize("pattern", ["diagonal", "crisscross"])
def test_interior_normals_opposite(pattern):
    m = build_structured_mesh(5, pattern)
    interior = np.flatnonzero(~m.is_boundary_face)
    for f in interior:
        normals = []
        for t in m.face_elements[f]:
            i = int(np.flatnonzero(m.element_faces[t] == f)[0])
            normals.append(m.normals[t, i])
        assert np.abs(normals[0] + normals[1]).max() < 1e-14


@pytest.mark.parametrize("pattern", ["diagonal", "crisscross"])
def test_refinement_halves_h_and_keeps_shape(pattern):
    meshes = [build_structured_mesh(n, pattern) for n in (2, 4, 8)]
    hs = [m.h for m in meshes]
    assert hs[0] / hs[1] == pytest.approx(2.0, abs=1e-14)
    assert hs[1] / hs[2] == pytest.approx(2.0, abs=1e-14)
    ratios = [float((m.diameters / m.inradii()).max()) for m in meshes]
    assert max(ratios) - min(ratios) < 1e-12


def test_signs_match_global_normals():
    m = build_structured_mesh(3)
    fv = m.vertices[m.faces]
    t = fv[:, 1] - fv[:, 0]
    gn = np.stack([t[:, 1], -t[:, 0]], axis=-1) / m.face_lengths[:, None]
    np.testing.assert_allclose(m.normals, m.element_face_signs[..., None] * gn[m.element_faces],
                               atol=1e-15)


def test_mesh_file_roundtrip(tmp_path):
    m = build_structured_mesh(3, "crisscross")
    path = tmp_path / "mesh.txt"
    write_mesh(m, path)
    back = read_mesh(path)
    np.testing.assert_array_equal(back.triangles, m.triangles)
    np.testing.assert_array_equal(back.vertices, m.vertices)


def test_mesh_file_errors(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("not a mesh\n")
    with pytest.raises(MeshError):
        read_mesh(bad)
    bad.write_text("ns-mesh 2d\n3\n0 0\n1 0\n")
    with pytest.raises(MeshError):
        read_mesh(bad)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.floats(0.05, 0.95), st.floats(0.05, 0.95)), min_size=1, max_size=6))
def test_perturbed_mesh_identities(shifts):
    # jiggle interior vertices of a 4x4 mesh; identities must survive
    base = build_structured_mesh(4)
    verts = base.vertices.copy()
    interior = np.flatnonzero((verts > 0).all(axis=1) & (verts < 1).all(axis=1))
    for i, (a, b) in enumerate(shifts):
        v = interior[i % len(interior)]
        verts[v] += 0.08 * (np.array([a, b]) - 0.5)
    m = from_arrays(verts, base.triangles)
    lengths = m.face_lengths[m.element_faces]
    np.testing.assert_allclose((m.face_distances * lengths).sum(axis=1), 2 * m.areas, rtol=1e-12)
    assert abs(m.areas.sum() - 1.0) < 1e-13
