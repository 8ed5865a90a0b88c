"""Triangle mesh container, adjacency, components, and smoothness energies.

Everything downstream (surface extraction, segmentation cleanup, rendering,
losses) goes through :class:`TriMesh`. Meshes are immutable value snapshots:
operations return new arrays and never mutate shared state, so they are safe
to use from multiple threads. Reductions use a fixed summation order so
repeated calls on the same input are bit-stable.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

BODY = 0
CLOTH = 1

_MIN_FACE_AREA = 1e-12


class MeshError(ValueError):
    """Invalid mesh topology or geometry."""


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Triangle mesh with optional per-face layer labels and vertex colors.

    Parameters
    ----------
    vertices : (n, 3) float array
        Positions in meters.
    faces : (m, 3) int array
        Vertex index triples, consistently wound.
    face_labels : (m,) int array, optional
        Per-face tag, ``BODY`` (0) or ``CLOTH`` (1).
    vertex_colors : (n, 3) float array, optional
        RGB in [0, 1].
    validate : bool
        Run invariant checks on construction. Hot paths that build meshes
        from already-checked data may pass False.
    """

    vertices: np.ndarray
    faces: np.ndarray
    face_labels: np.ndarray | None = None
    vertex_colors: np.ndarray | None = None
    validate: bool = True

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3))
        f = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.face_labels is not None:
            object.__setattr__(self, "face_labels", np.asarray(self.face_labels, dtype=np.int8).ravel())
        if self.vertex_colors is not None:
            object.__setattr__(self, "vertex_colors",
                               np.asarray(self.vertex_colors, dtype=np.float64).reshape(-1, 3))
        if self.validate:
            self._check()
        object.__setattr__(self, "validate", True)

    def _check(self):
        v, f = self.vertices, self.faces
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError(f"face index out of range (vertex count {len(v)})")
        if f.size:
            if np.any(f[:, 0] == f[:, 1]) or np.any(f[:, 1] == f[:, 2]) or np.any(f[:, 0] == f[:, 2]):
                bad = int(np.nonzero((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2]))[0][0])
                raise MeshError(f"face {bad} repeats a vertex")
            areas = self.face_areas
            if np.any(areas <= _MIN_FACE_AREA):
                bad = int(np.argmin(areas))
                raise MeshError(f"face {bad} is degenerate (area {areas[bad]:.3e} m^2)")
        if self.face_labels is not None and len(self.face_labels) != len(f):
            raise MeshError("face_labels length does not match face count")
        if self.vertex_colors is not None and len(self.vertex_colors) != len(v):
            raise MeshError("vertex_colors length does not match vertex count")

    # -- basic geometry -------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @cached_property
    def face_cross(self) -> np.ndarray:
        """Unnormalized face normals (cross products of edge vectors)."""
        v = self.vertices
        a, b, c = v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]
        return np.cross(b - a, c - a)

    @cached_property
    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross, axis=1)

    @property
    def area(self) -> float:
        return float(self.face_areas.sum())

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges, (e, 2) with sorted vertex pairs."""
        return self._edge_data[0]

    @cached_property
    def _edge_data(self):
        f = self.faces
        he = np.stack([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=1).reshape(-1, 2)
        he = np.sort(he, axis=1)
        edges, inverse, counts = np.unique(he, axis=0, return_inverse=True, return_counts=True)
        return edges, inverse.reshape(-1, 3), counts

    @property
    def face_edge_ids(self) -> np.ndarray:
        """(m, 3) edge index per face corner-opposite slot."""
        return self._edge_data[1]

    @property
    def edge_face_counts(self) -> np.ndarray:
        return self._edge_data[2]

    @cached_property
    def edge_faces(self) -> np.ndarray:
        """(e, 2) incident faces per edge; -1 where fewer than two."""
        edges, inverse, counts = self._edge_data
        out = np.full((len(edges), 2), -1, dtype=np.int64)
        order = np.argsort(inverse.ravel(), kind="stable")
        face_of = order // 3
        starts = np.concatenate([[0], np.cumsum(counts)])
        for slot in range(2):
            has = counts > slot
            out[has, slot] = face_of[starts[:-1][has] + slot]
        return out

    def is_watertight(self) -> bool:
        """True when every edge is shared by exactly two faces."""
        return self.n_faces > 0 and bool(np.all(self.edge_face_counts == 2))

    def boundary_edges(self) -> np.ndarray:
        """Edges incident to exactly one face, (k, 2)."""
        return self.edges[self.edge_face_counts == 1]

    def with_labels(self, labels: np.ndarray) -> "TriMesh":
        labels = np.asarray(labels, dtype=np.int8).ravel()
        if len(labels) != self.n_faces:
            raise MeshError("face_labels length does not match face count")
        # geometry was accepted when self was built; don't re-audit it
        return TriMesh(self.vertices, self.faces, labels, self.vertex_colors,
                       validate=False)

    def submesh(self, face_mask: np.ndarray, compact: bool = True) -> "TriMesh":
        """Mesh restricted to ``face_mask`` faces, reindexing vertices."""
        faces = self.faces[face_mask]
        labels = self.face_labels[face_mask] if self.face_labels is not None else None
        if not compact:
            return TriMesh(self.vertices, faces, labels, self.vertex_colors,
                           validate=False)
        used = np.unique(faces)
        remap = np.full(self.n_vertices, -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        colors = self.vertex_colors[used] if self.vertex_colors is not None else None
        return TriMesh(self.vertices[used], remap[faces], labels, colors,
                       validate=False)


@dataclass(frozen=True, eq=False)
class ComponentSet:
    """Edge-connected face components of one label class.

    ``components`` are face-index arrays sorted by unique-vertex count,
    largest first (ties broken by smallest minimum face index so the order
    is deterministic). ``sizes`` are those vertex counts in matching order.
    """

    components: list = field(default_factory=list)
    sizes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def connected_components(mesh: TriMesh, label: int) -> ComponentSet:
    """Edge-connected components among faces carrying ``label``.

    Faces belong to the same component when they share a mesh edge and both
    carry the requested label. Sharing only a vertex does not connect them.
    """
    if mesh.face_labels is None:
        raise MeshError("connected_components requires face_labels")
    sel = np.nonzero(mesh.face_labels == label)[0]
    if len(sel) == 0:
        return ComponentSet([], np.zeros(0, dtype=np.int64))
    in_sel = np.full(mesh.n_faces, -1, dtype=np.int64)
    in_sel[sel] = np.arange(len(sel))
    ef = mesh.edge_faces
    both = (ef[:, 0] >= 0) & (ef[:, 1] >= 0)
    pairs = ef[both]
    keep = (in_sel[pairs[:, 0]] >= 0) & (in_sel[pairs[:, 1]] >= 0)
    pairs = in_sel[pairs[keep]]
    n = len(sel)
    graph = sparse.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    n_comp, assign = csgraph.connected_components(graph, directed=False)
    comps = []
    sizes = np.empty(n_comp, dtype=np.int64)
    min_face = np.empty(n_comp, dtype=np.int64)
    for c in range(n_comp):
        faces = sel[assign == c]
        comps.append(faces)
        sizes[c] = len(np.unique(mesh.faces[faces]))
        min_face[c] = faces.min()
    order = np.lexsort((min_face, -sizes))
    return ComponentSet([comps[i] for i in order], sizes[order])


def face_normals(mesh: TriMesh) -> np.ndarray:
    """Unit right-hand-rule normals, (m, 3)."""
    cross = mesh.face_cross
    norms = np.linalg.norm(cross, axis=1)
    if np.any(norms < 2.0 * _MIN_FACE_AREA):
        bad = int(np.argmin(norms))
        raise MeshError(f"face {bad} is degenerate; no normal")
    return cross / norms[:, None]


def face_normals_backward(mesh: TriMesh, d_normals: np.ndarray) -> np.ndarray:
    """Backpropagate gradients on unit face normals to vertex positions.

    ``d_normals`` is (m, 3); returns (n, 3) accumulated vertex gradients.
    """
    v = mesh.vertices
    f = mesh.faces
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    cross = mesh.face_cross
    norm = np.linalg.norm(cross, axis=1, keepdims=True)
    n = cross / norm
    # d cross = (I - n n^T)/|cross| applied to d_normals
    d_cross = (d_normals - n * np.sum(n * d_normals, axis=1, keepdims=True)) / norm
    u = b - a  # cross = u x w with w = c - a
    w = c - a
    d_b = np.cross(w, d_cross)          # (dcross/db)^T g = -[w]_x^T g = w x g
    d_c = np.cross(d_cross, u)          # ([u]_x)^T g = -u x g = g x u
    d_a = -d_b - d_c
    grad = np.zeros_like(v)
    np.add.at(grad, f[:, 0], d_a)
    np.add.at(grad, f[:, 1], d_b)
    np.add.at(grad, f[:, 2], d_c)
    return grad


def _uniform_laplacian(mesh: TriMesh) -> sparse.csr_matrix:
    """L = I - D^-1 A over the edge graph; zero rows at isolated vertices."""
    n = mesh.n_vertices
    e = mesh.edges
    if len(e) == 0:
        return sparse.csr_matrix((n, n))
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    adj = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()
    deg = np.asarray(adj.sum(axis=1)).ravel()
    inv = np.zeros(n)
    nz = deg > 0
    inv[nz] = 1.0 / deg[nz]
    ident = sparse.diags(nz.astype(np.float64))  # isolated vertices contribute zero
    return (ident - sparse.diags(inv) @ adj).tocsr()


def laplacian_energy(mesh: TriMesh, return_per_vertex: bool = False):
    """Sum over vertices of the squared uniform-Laplacian magnitude.

    Each vertex contributes ``|x_v - mean(neighbors)|^2``; isolated vertices
    contribute zero. Returns ``(energy, grad)`` with ``grad`` of shape
    (n, 3); with ``return_per_vertex`` the per-vertex contributions are
    appended.
    """
    lap = _uniform_laplacian(mesh)
    delta = lap @ mesh.vertices
    per_vertex = np.sum(delta * delta, axis=1)
    energy = float(per_vertex.sum())
    grad = 2.0 * (lap.T @ delta)
    if return_per_vertex:
        return energy, grad, per_vertex
    return energy, grad


def normal_consistency_energy(mesh: TriMesh):
    """Sum over interior edges of ``1 - n_i . n_j`` for adjacent face normals.

    Returns ``(energy, grad)`` with per-vertex gradient (n, 3). Zero on any
    flat region; grows as adjacent faces fold.
    """
    ef = mesh.edge_faces
    interior = (mesh.edge_face_counts == 2)
    pairs = ef[interior]
    if len(pairs) == 0:
        return 0.0, np.zeros_like(mesh.vertices)
    normals = face_normals(mesh)
    ni, nj = normals[pairs[:, 0]], normals[pairs[:, 1]]
    energy = float(np.sum(1.0 - np.sum(ni * nj, axis=1)))
    d_n = np.zeros_like(normals)
    np.add.at(d_n, pairs[:, 0], -nj)
    np.add.at(d_n, pairs[:, 1], -ni)
    return energy, face_normals_backward(mesh, d_n)


def weld_vertices(mesh: TriMesh, tol: float = 1e-9) -> tuple[TriMesh, int]:
    """Merge vertices closer than ``tol``; returns (mesh, n_removed).

    Faces that collapse to fewer than three distinct vertices are dropped.
    """
    v = mesh.vertices
    if len(v) == 0:
        return mesh, 0
    key = np.round(v / tol).astype(np.int64) if tol > 0 else v
    _, first, remap = np.unique(key, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")  # keep original vertex order
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    remap = rank[remap]
    new_v = v[first[order]]
    new_colors = mesh.vertex_colors[first[order]] if mesh.vertex_colors is not None else None
    faces = remap[mesh.faces]
    ok = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    labels = mesh.face_labels[ok] if mesh.face_labels is not None else None
    removed = len(v) - len(new_v)
    return TriMesh(new_v, faces[ok], labels, new_colors, validate=False), removed


def collapse_slivers(mesh: TriMesh, min_area: float = 1e-11,
                     max_rounds: int = 8) -> tuple[TriMesh, int]:
    """Remove near-zero-area faces by collapsing their shortest edge.

    Field-crossing tessellation can leave triangles whose cut vertex sits
    within rounding of an existing vertex; such faces have well-defined
    geometry but no usable normal.  Each collapse merges the two endpoints
    of the face's shortest edge (keeping the lower index) and drops faces
    that lose a distinct vertex, which keeps a closed surface closed.
    Returns ``(mesh, n_faces_removed)``.
    """
    out = mesh
    removed = 0
    for _ in range(max_rounds):
        areas = out.face_areas
        bad = np.nonzero(areas <= min_area)[0]
        if len(bad) == 0:
            break
        v = out.vertices
        mapping = np.arange(out.n_vertices)
        for fidx in bad:
            a, b, c = out.faces[fidx]
            pairs = ((a, b), (b, c), (c, a))
            lens = [np.linalg.norm(v[p] - v[q]) for p, q in pairs]
            p, q = pairs[int(np.argmin(lens))]
            i, j = (p, q) if p < q else (q, p)
            mapping[j] = i
        while True:  # resolve merge chains j -> i -> ...
            nxt = mapping[mapping]
            if np.array_equal(nxt, mapping):
                break
            mapping = nxt
        used = np.unique(mapping)
        rank = np.full(out.n_vertices, -1, dtype=np.int64)
        rank[used] = np.arange(len(used))
        faces = rank[mapping[out.faces]]
        ok = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) \
            & (faces[:, 0] != faces[:, 2])
        labels = out.face_labels[ok] if out.face_labels is not None else None
        colors = out.vertex_colors[used] if out.vertex_colors is not None else None
        removed += int(np.sum(~ok))
        out = TriMesh(v[used], faces[ok], labels, colors, validate=False)
    return out, removed


def boundary_loops(mesh: TriMesh) -> list[np.ndarray]:
    """Closed vertex loops along the mesh boundary, one array per loop.

    Each loop is ordered by walking boundary edges; orientation follows the
    winding of the incident faces. Open chains (non-manifold boundaries) are
    returned as-is without closing.
    """
    edges, inverse, counts = mesh._edge_data
    b_ids = np.nonzero(counts == 1)[0]
    if len(b_ids) == 0:
        return []
    # recover directed boundary edges from the face winding
    f = mesh.faces
    he = np.stack([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=1).reshape(-1, 2)
    on_boundary = np.isin(inverse.ravel(), b_ids)
    directed = he[on_boundary]
    nxt = {int(a): int(b) for a, b in directed}
    loops = []
    seen = set()
    for start in sorted(nxt):
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        cur = nxt[start]
        while cur != start and cur in nxt and cur not in seen:
            loop.append(cur)
            seen.add(cur)
            cur = nxt[cur]
        loops.append(np.array(loop, dtype=np.int64))
    return loops
