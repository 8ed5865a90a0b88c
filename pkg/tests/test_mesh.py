"""Mesh container, adjacency, components, and smoothness energies."""
from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layerfit.mesh import (BODY, CLOTH, MeshError, TriMesh, boundary_loops,
                           collapse_slivers, connected_components,
                           face_normals, face_normals_backward,
                           laplacian_energy, normal_consistency_energy,
                           weld_vertices)

from conftest import central_diff, perturbed, rel_err, tetra_mesh


# ---------------------------------------------------------------------------
# construction and invariants


def test_face_index_out_of_range():
    with pytest.raises(MeshError, match="out of range"):
        TriMesh(np.zeros((2, 3)), [[0, 1, 2]])


def test_repeated_vertex_rejected():
    with pytest.raises(MeshError, match="repeats a vertex"):
        TriMesh(np.eye(3), [[0, 1, 1]])


def test_degenerate_face_rejected():
    verts = [[0, 0, 0], [1, 0, 0], [2, 0, 0]]  # collinear
    with pytest.raises(MeshError, match="degenerate"):
        TriMesh(verts, [[0, 1, 2]])


def test_label_length_mismatch():
    with pytest.raises(MeshError, match="face_labels"):
        TriMesh(np.eye(3), [[0, 1, 2]], face_labels=[0, 1])


def test_watertightness():
    assert tetra_mesh().is_watertight()
    open_mesh = TriMesh(np.eye(3), [[0, 1, 2]])
    assert not open_mesh.is_watertight()
    assert len(open_mesh.boundary_edges()) == 3


def test_submesh_reindexes():
    m = tetra_mesh().with_labels([0, 1, 1, 0])
    sub = m.submesh(m.face_labels == 1)
    assert sub.n_faces == 2
    assert sub.faces.max() < sub.n_vertices
    assert np.all(sub.face_labels == 1)


# ---------------------------------------------------------------------------
# connected components vs. an independent union-find oracle


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, a):
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[ra] = rb


def _oracle_components(mesh: TriMesh, label: int):
    """Brute-force reference: union faces over shared edges, same label."""
    sel = [i for i in range(mesh.n_faces) if mesh.face_labels[i] == label]
    uf = _UnionFind(mesh.n_faces)
    edge_map: dict = {}
    for fi in sel:
        f = mesh.faces[fi]
        for e in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            key = (min(e), max(e))
            if key in edge_map:
                uf.union(fi, edge_map[key])
            else:
                edge_map[key] = fi
    groups: dict = {}
    for fi in sel:
        groups.setdefault(uf.find(fi), []).append(fi)
    return {frozenset(g) for g in groups.values()}


def test_single_face_component():
    m = tetra_mesh().with_labels([1, 0, 0, 0])
    cs = connected_components(m, 1)
    assert len(cs.components) == 1
    assert cs.sizes[0] == 3


def test_disjoint_faces_two_components():
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0],
                      [5, 0, 0], [6, 0, 0], [5, 1, 0]], dtype=float)
    m = TriMesh(verts, [[0, 1, 2], [3, 4, 5]], face_labels=[1, 1])
    cs = connected_components(m, 1)
    assert len(cs.components) == 2


def test_vertex_contact_does_not_connect():
    # two triangles sharing exactly one vertex
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 0]],
                     dtype=float)
    m = TriMesh(verts, [[0, 1, 2], [0, 3, 4]], face_labels=[1, 1])
    assert len(connected_components(m, 1).components) == 2


def test_missing_labels_rejected():
    with pytest.raises(MeshError):
        connected_components(TriMesh(np.eye(3), [[0, 1, 2]]), 0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_components_match_union_find_oracle(seed):
    base = tetra_mesh()
    rng = np.random.default_rng(seed)
    # subdivide once so the sphere of labelings is non-trivial
    mesh = _subdivide(base)
    labels = rng.integers(0, 2, mesh.n_faces).astype(np.int8)
    mesh = mesh.with_labels(labels)
    for label in (BODY, CLOTH):
        got = {frozenset(int(i) for i in c)
               for c in connected_components(mesh, label).components}
        assert got == _oracle_components(mesh, label)


def test_components_sorted_by_vertex_count(banded_sphere):
    cs = connected_components(banded_sphere, BODY)
    assert len(cs.components) == 2  # two polar caps
    assert np.all(np.diff(cs.sizes) <= 0)


def _subdivide(mesh: TriMesh) -> TriMesh:
    """1-to-4 midpoint subdivision (positions only, labels dropped)."""
    edges = mesh.edges
    mid_of = {tuple(e): mesh.n_vertices + i for i, e in enumerate(edges)}
    mids = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    verts = np.vstack([mesh.vertices, mids])
    faces = []
    for a, b, c in mesh.faces:
        ab = mid_of[tuple(sorted((a, b)))]
        bc = mid_of[tuple(sorted((b, c)))]
        ca = mid_of[tuple(sorted((c, a)))]
        faces += [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]
    return TriMesh(verts, faces)


# ---------------------------------------------------------------------------
# face normals


def test_planar_normal():
    m = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    np.testing.assert_allclose(face_normals(m)[0], [0, 0, 1], atol=1e-15)


def test_orientation_flip():
    m = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 2, 1]])
    np.testing.assert_allclose(face_normals(m)[0], [0, 0, -1], atol=1e-15)


def _icosphere(levels: int = 3) -> TriMesh:
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([[-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
                      [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
                      [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1]],
                     dtype=float)
    faces = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
             [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
             [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
             [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    mesh = TriMesh(verts / np.linalg.norm(verts, axis=1, keepdims=True), faces)
    for _ in range(levels):
        mesh = _subdivide(mesh)
        v = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
        mesh = TriMesh(v, mesh.faces, validate=False)
    return mesh


def test_icosphere_normals_radial():
    mesh = _icosphere()
    n = face_normals(mesh)
    centers = mesh.vertices[mesh.faces].mean(axis=1)
    radial = centers / np.linalg.norm(centers, axis=1, keepdims=True)
    cos = np.sum(n * radial, axis=1)
    assert np.all(cos > np.cos(np.deg2rad(5.0)))


def test_unit_length(sphere_mesh):
    lengths = np.linalg.norm(face_normals(sphere_mesh), axis=1)
    np.testing.assert_allclose(lengths, 1.0, atol=1e-9)


def test_face_normals_backward_matches_fd(rng):
    mesh = perturbed(tetra_mesh(), rng, 0.05)
    d_n = rng.normal(size=(mesh.n_faces, 3))

    def scalar(v):
        m = TriMesh(v, mesh.faces, validate=False)
        return float(np.sum(face_normals(m) * d_n))

    fd = central_diff(scalar, mesh.vertices.copy())
    got = face_normals_backward(mesh, d_n)
    assert rel_err(got, fd) < 1e-6


# ---------------------------------------------------------------------------
# smoothness energies


def _flat_grid(n: int = 5) -> TriMesh:
    xs, ys = np.meshgrid(np.arange(n, dtype=float), np.arange(n, dtype=float))
    verts = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(n * n)])
    faces = []
    for i in range(n - 1):
        for j in range(n - 1):
            a = i * n + j
            faces += [[a, a + 1, a + n], [a + 1, a + n + 1, a + n]]
    return TriMesh(verts, faces)


def test_laplacian_zero_interior_symmetric_grid():
    # every interior vertex of the regular grid equals its neighbor centroid
    m = _flat_grid(5)
    _, _, per_vertex = laplacian_energy(m, return_per_vertex=True)
    interior = []
    for i in range(5):
        for j in range(5):
            if 0 < i < 4 and 0 < j < 4:
                interior.append(i * 5 + j)
    np.testing.assert_allclose(per_vertex[interior], 0.0, atol=1e-24)


def test_laplacian_displaced_vertex():
    m = _flat_grid(5)
    h = 0.07
    v = m.vertices.copy()
    v[12, 2] += h  # center vertex of the 5x5 grid
    _, _, per_vertex = laplacian_energy(TriMesh(v, m.faces), return_per_vertex=True)
    np.testing.assert_allclose(per_vertex[12], h * h, rtol=1e-12)


def test_laplacian_translation_invariant(sphere_mesh):
    e0, _ = laplacian_energy(sphere_mesh)
    shifted = TriMesh(sphere_mesh.vertices + np.array([0.3, -1.2, 2.0]),
                      sphere_mesh.faces, validate=False)
    e1, _ = laplacian_energy(shifted)
    assert abs(e0 - e1) <= 1e-9 * max(e0, 1.0)


def test_laplacian_gradient_matches_fd(rng):
    mesh = perturbed(tetra_mesh(), rng, 0.1)

    def scalar(v):
        return laplacian_energy(TriMesh(v, mesh.faces, validate=False))[0]

    fd = central_diff(scalar, mesh.vertices.copy())
    _, got = laplacian_energy(mesh)
    assert rel_err(got, fd) < 1e-7


def test_normal_consistency_flat_is_zero():
    m = _flat_grid(4)
    e, g = normal_consistency_energy(m)
    assert e == pytest.approx(0.0, abs=1e-18)
    np.testing.assert_allclose(g, 0.0, atol=1e-12)


def test_normal_consistency_gradient_matches_fd(rng):
    mesh = perturbed(tetra_mesh(), rng, 0.1)

    def scalar(v):
        return normal_consistency_energy(TriMesh(v, mesh.faces, validate=False))[0]

    fd = central_diff(scalar, mesh.vertices.copy())
    _, got = normal_consistency_energy(mesh)
    assert rel_err(got, fd) < 1e-6


def test_normal_consistency_positive_on_fold(sphere_mesh):
    e, _ = normal_consistency_energy(sphere_mesh)
    assert e > 0.0


# ---------------------------------------------------------------------------
# welding, sliver collapse, boundary loops


def test_weld_merges_duplicates():
    verts = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1.0 + 1e-12, 0, 0], [1, 1, 0]]
    m = TriMesh(verts, [[0, 1, 2], [3, 4, 2]])
    welded, removed = weld_vertices(m, tol=1e-9)
    assert removed == 1
    assert welded.n_vertices == 4
    assert welded.n_faces == 2
    assert welded.is_watertight() is False


def test_weld_drops_collapsed_faces():
    verts = [[0, 0, 0], [1e-12, 0, 0], [0, 1, 0]]
    m = TriMesh(verts, [[0, 1, 2]], validate=False)
    welded, _ = weld_vertices(m, tol=1e-9)
    assert welded.n_faces == 0


def test_collapse_slivers_keeps_closed_surface(sphere_mesh):
    # crush one vertex onto a neighbor to manufacture sliver faces
    v = sphere_mesh.vertices.copy()
    a, b = sphere_mesh.faces[0, 0], sphere_mesh.faces[0, 1]
    v[b] = v[a] + 1e-13
    broken = TriMesh(v, sphere_mesh.faces, validate=False)
    fixed, removed = collapse_slivers(broken)
    assert removed >= 2  # the two faces sharing the crushed edge
    assert fixed.is_watertight()
    assert np.all(fixed.face_areas > 1e-11)


def test_boundary_loops_on_closed_mesh(sphere_mesh):
    assert boundary_loops(sphere_mesh) == []


def test_boundary_loop_of_fan():
    m = _flat_grid(3)
    loops = boundary_loops(m)
    assert len(loops) == 1
    assert len(loops[0]) == 8  # perimeter of the 3x3 grid


def test_boundary_loops_two_holes(sphere_mesh):
    y = sphere_mesh.vertices[sphere_mesh.faces].mean(axis=1)[:, 1]
    band = sphere_mesh.submesh(np.abs(y) < 0.3)
    loops = boundary_loops(band)
    assert len(loops) == 2
    for loop in loops:
        assert len(loop) >= 3
