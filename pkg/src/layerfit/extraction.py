"""Differentiable surface extraction from grid fields, plus layer splitting.

``extract_surface`` runs marching tetrahedra over the lattice: every lattice
edge whose signed-distance endpoints straddle zero contributes one surface
vertex at the linear zero crossing, and each straddling tet contributes one
or two triangles wired from those shared edge vertices, so the result is
watertight by construction. Vertex positions are differentiable with respect
to the endpoint distances through the interpolation parameter
``t = s_i / (s_i - s_j)``; the layer field rides to the surface through the
same parameter.

``split_surface`` then cuts the watertight surface along the zero set of the
on-surface layer field: faces with mixed layer signs are re-tessellated with
boundary vertices inserted on crossing edges, and every piece is labeled
body or cloth. Boundary vertex positions are differentiable with respect to
the layer values, which is the only path by which image losses can teach
the layer field where the garment ends.

Case tables are generated at import time from first principles: candidate
triangles are oriented by checking the sign of the volume spanned with the
inside-to-outside direction, never transcribed by hand.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import TriMesh, BODY, CLOTH
from .tetgrid import TET_EDGES, TetGrid, FieldState, GridError

_REF_TET = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])

# crossing-parameter clamp: keeps surface vertices off the lattice points
T_CLAMP = 1e-3


def _build_tet_table() -> list[np.ndarray]:
    """Triangulations of the zero crossing for all 16 inside/outside patterns.

    Entry ``p`` lists triangles as triples of local edge indices (into
    ``TET_EDGES``), wound so normals point from the inside (negative) region
    toward the outside. Validity for every tet in the lattice follows from
    the tets being positively oriented and the crossing polygon staying
    convex: the winding handedness cannot flip within one sign pattern.
    """
    edge_of = {tuple(sorted(e)): k for k, e in enumerate(TET_EDGES.tolist())}
    table = []
    for pattern in range(16):
        inside = [v for v in range(4) if pattern >> v & 1]
        outside = [v for v in range(4) if not pattern >> v & 1]
        if not inside or not outside:
            table.append(np.zeros((0, 3), dtype=np.int64))
            continue
        if len(inside) == 1 or len(inside) == 3:
            apex = inside[0] if len(inside) == 1 else outside[0]
            ring = [v for v in range(4) if v != apex]
            loop = [edge_of[tuple(sorted((apex, v)))] for v in ring]
            tris = [[loop[0], loop[1], loop[2]]]
        else:
            a, b = inside
            c, d = outside
            # quad perimeter: consecutive crossing edges share a tet face
            loop = [edge_of[tuple(sorted(e))] for e in ((a, c), (a, d), (b, d), (b, c))]
            tris = [[loop[0], loop[1], loop[2]], [loop[0], loop[2], loop[3]]]
        # midpoint reference geometry fixes the winding for the whole pattern
        mids = {k: 0.5 * (_REF_TET[i] + _REF_TET[j]) for (i, j), k in
                ((tuple(e), edge_of[tuple(sorted(e))]) for e in
                 [(i, j) for i in range(4) for j in range(i + 1, 4)])}
        outward = _REF_TET[outside].mean(axis=0) - _REF_TET[inside].mean(axis=0)
        fixed = []
        for tri in tris:
            p0, p1, p2 = (mids[k] for k in tri)
            if np.dot(np.cross(p1 - p0, p2 - p0), outward) < 0:
                tri = [tri[0], tri[2], tri[1]]
            fixed.append(tri)
        table.append(np.array(fixed, dtype=np.int64))
    return table


_TET_TABLE = _build_tet_table()


@dataclass(eq=False)
class SurfaceExtraction:
    """Marching-tetrahedra output with the data needed for backprop.

    ``vertex_pairs`` holds the lattice endpoints (i, j) of the crossing edge
    behind each surface vertex, ``t`` the interpolation parameter so that
    ``x = (1 - t) v_i + t v_j``. ``hm`` is the layer field carried to the
    surface with the same weights. ``colors``, when the grid has an RGB
    field, is interpolated identically.
    """

    mesh: TriMesh
    vertex_pairs: np.ndarray
    t: np.ndarray
    hm: np.ndarray
    grid: TetGrid
    sdf: np.ndarray
    hm_grid: np.ndarray
    colors: np.ndarray | None = None

    def backward(self, d_positions=None, d_hm=None, d_colors=None,
                 grid_colors: np.ndarray | None = None):
        """Pull gradients on surface quantities back to the grid fields.

        Returns ``(d_sdf, d_hm_grid)`` or ``(d_sdf, d_hm_grid, d_grid_colors)``
        when ``grid_colors`` is passed. The interpolation parameter couples
        everything to the distance field: moving the crossing point along its
        lattice edge changes the sampled layer value and color too.
        """
        i, j = self.vertex_pairs[:, 0], self.vertex_pairs[:, 1]
        s_i, s_j = self.sdf[i], self.sdf[j]
        v = self.grid.vertices
        d_t = np.zeros(len(self.t))
        d_sdf = np.zeros(len(self.sdf))
        d_hm_grid = np.zeros(len(self.hm_grid))
        if d_positions is not None:
            d_t += np.sum(np.asarray(d_positions) * (v[j] - v[i]), axis=1)
        if d_hm is not None:
            d_hm = np.asarray(d_hm)
            np.add.at(d_hm_grid, i, (1.0 - self.t) * d_hm)
            np.add.at(d_hm_grid, j, self.t * d_hm)
            d_t += d_hm * (self.hm_grid[j] - self.hm_grid[i])
        want_colors = grid_colors is not None
        d_grid_colors = np.zeros((len(self.sdf), 3)) if want_colors else None
        if d_colors is not None:
            if not want_colors:
                raise GridError("d_colors given without grid_colors")
            d_colors = np.asarray(d_colors)
            np.add.at(d_grid_colors, i, (1.0 - self.t)[:, None] * d_colors)
            np.add.at(d_grid_colors, j, self.t[:, None] * d_colors)
            d_t += np.sum(d_colors * (grid_colors[j] - grid_colors[i]), axis=1)
        t_raw = s_i / (s_i - s_j)
        d_t *= (t_raw > T_CLAMP) & (t_raw < 1.0 - T_CLAMP)  # flat where clamped
        denom = (s_i - s_j) ** 2
        np.add.at(d_sdf, i, d_t * (-s_j / denom))
        np.add.at(d_sdf, j, d_t * (s_i / denom))
        if want_colors:
            return d_sdf, d_hm_grid, d_grid_colors
        return d_sdf, d_hm_grid


def extract_surface(grid: TetGrid, state: FieldState,
                    grid_colors: np.ndarray | None = None) -> SurfaceExtraction:
    """Extract the zero level set of ``state.sdf`` as a watertight mesh.

    Distances of exactly zero count as outside so every crossing edge has a
    strictly negative endpoint and the interpolation denominator never
    vanishes.
    """
    sdf = state.sdf
    if sdf.shape != (grid.n_vertices,):
        raise GridError(f"sdf has shape {sdf.shape}, want ({grid.n_vertices},)")
    inside = sdf < 0.0
    tets = grid.tets
    pattern = (inside[tets] << np.arange(4)).sum(axis=1)
    active = (pattern > 0) & (pattern < 15)
    act_tets = tets[active]
    act_pat = pattern[active]
    pairs = np.sort(act_tets[:, TET_EDGES], axis=2)  # (A, 6, 2) ascending
    face_pairs = []
    for p in range(1, 15):
        rows = np.nonzero(act_pat == p)[0]
        tri_edges = _TET_TABLE[p]
        if len(rows) == 0 or len(tri_edges) == 0:
            continue
        face_pairs.append(pairs[rows][:, tri_edges].reshape(-1, 3, 2))
    if not face_pairs:
        empty = TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), validate=False)
        return SurfaceExtraction(empty, np.zeros((0, 2), dtype=np.int64), np.zeros(0),
                                 np.zeros(0), grid, sdf, state.hm,
                                 np.zeros((0, 3)) if grid_colors is not None else None)
    face_pairs = np.concatenate(face_pairs)  # (F, 3, 2)
    uniq, inv = np.unique(face_pairs.reshape(-1, 2), axis=0, return_inverse=True)
    faces = inv.reshape(-1, 3)
    i, j = uniq[:, 0], uniq[:, 1]
    s_i, s_j = sdf[i], sdf[j]
    # clamp keeps crossings a hair off the lattice vertices so no face
    # collapses below the degeneracy threshold (position shift <= 1e-3 cell)
    t = np.clip(s_i / (s_i - s_j), T_CLAMP, 1.0 - T_CLAMP)
    positions = (1.0 - t)[:, None] * grid.vertices[i] + t[:, None] * grid.vertices[j]
    hm = (1.0 - t) * state.hm[i] + t * state.hm[j]
    colors = None
    if grid_colors is not None:
        colors = (1.0 - t)[:, None] * grid_colors[i] + t[:, None] * grid_colors[j]
    mesh = TriMesh(positions, faces, vertex_colors=colors, validate=False)
    return SurfaceExtraction(mesh, uniq, t, hm, grid, sdf, state.hm, colors)


@dataclass(eq=False)
class SplitSurface:
    """Layer-labeled re-tessellation of an extracted surface.

    Rows ``0..n_orig-1`` of the split mesh are the original surface vertices;
    the remaining rows are boundary vertices inserted where the layer field
    crosses zero along a surface edge. ``boundary_pairs`` stores the original
    vertex pair of each inserted vertex and ``boundary_u`` the interpolation
    parameter along it.
    """

    mesh: TriMesh
    n_orig: int
    boundary_pairs: np.ndarray
    boundary_u: np.ndarray
    hm: np.ndarray
    source_face: np.ndarray  # original face behind each split face

    def backward(self, d_positions=None, d_colors=None,
                 orig_positions: np.ndarray | None = None,
                 orig_colors: np.ndarray | None = None):
        """Pull split-mesh gradients back to surface positions and layer values.

        Returns ``(d_orig_positions, d_hm)`` or, when color gradients are
        supplied, ``(d_orig_positions, d_hm, d_orig_colors)``. The layer
        gradient is nonzero only at endpoints of crossing edges: nudging those
        values slides the garment boundary along the surface.
        """
        n = self.n_orig
        bi, bj = self.boundary_pairs[:, 0], self.boundary_pairs[:, 1]
        u = self.boundary_u
        h_i, h_j = self.hm[bi], self.hm[bj]
        d_u = np.zeros(len(u))
        d_orig = None
        if d_positions is not None:
            if orig_positions is None:
                raise GridError("orig_positions required with d_positions")
            d_positions = np.asarray(d_positions)
            d_orig = d_positions[:n].astype(np.float64).copy()
            d_b = d_positions[n:]
            np.add.at(d_orig, bi, (1.0 - u)[:, None] * d_b)
            np.add.at(d_orig, bj, u[:, None] * d_b)
            d_u += np.sum(d_b * (orig_positions[bj] - orig_positions[bi]), axis=1)
        d_orig_colors = None
        if d_colors is not None:
            if orig_colors is None:
                raise GridError("orig_colors required with d_colors")
            d_colors = np.asarray(d_colors)
            d_orig_colors = d_colors[:n].astype(np.float64).copy()
            d_bc = d_colors[n:]
            np.add.at(d_orig_colors, bi, (1.0 - u)[:, None] * d_bc)
            np.add.at(d_orig_colors, bj, u[:, None] * d_bc)
            d_u += np.sum(d_bc * (orig_colors[bj] - orig_colors[bi]), axis=1)
        d_hm = np.zeros(n)
        denom = (h_i - h_j) ** 2
        np.add.at(d_hm, bi, d_u * (-h_j / denom))
        np.add.at(d_hm, bj, d_u * (h_i / denom))
        if d_orig is None:
            d_orig = np.zeros((n, 3))
        if d_colors is not None:
            return d_orig, d_hm, d_orig_colors
        return d_orig, d_hm


def split_surface(surface_mesh: TriMesh, hm: np.ndarray) -> SplitSurface:
    """Cut a surface along the zero set of its per-vertex layer field.

    Vertices with ``hm > 0`` belong to the cloth layer, the rest to the body.
    Faces with uniform sign keep their geometry and get a label; mixed faces
    are cut by inserting one vertex on each crossing edge at
    ``u = h_i / (h_i - h_j)`` and re-tessellated into three labeled
    triangles that exactly tile the original. Total and per-face area are
    conserved to rounding.
    """
    hm = np.asarray(hm, dtype=np.float64).ravel()
    verts = surface_mesh.vertices
    faces = surface_mesh.faces
    colors = surface_mesh.vertex_colors
    if hm.shape != (len(verts),):
        raise GridError(f"hm has shape {hm.shape}, want ({len(verts)},)")
    cloth = hm > 0.0
    fc = cloth[faces]
    n_cloth = fc.sum(axis=1)
    uniform = (n_cloth == 0) | (n_cloth == 3)
    n = len(verts)

    # crossing edges over the whole mesh, one inserted vertex per edge
    he = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    cross_mask = cloth[he[:, 0]] != cloth[he[:, 1]]
    cross_pairs = np.unique(he[cross_mask], axis=0) if cross_mask.any() \
        else np.zeros((0, 2), dtype=np.int64)
    bi, bj = cross_pairs[:, 0], cross_pairs[:, 1]
    u = hm[bi] / (hm[bi] - hm[bj]) if len(bi) else np.zeros(0)
    b_pos = (1.0 - u)[:, None] * verts[bi] + u[:, None] * verts[bj]
    new_verts = np.vstack([verts, b_pos])
    new_colors = None
    if colors is not None:
        b_col = (1.0 - u)[:, None] * colors[bi] + u[:, None] * colors[bj]
        new_colors = np.vstack([colors, b_col])

    def edge_vertex(a, b):
        """Row of the inserted vertex on edge (a, b), vectorized."""
        key = np.sort(np.stack([a, b], axis=1), axis=1)
        # cross_pairs is sorted lexicographically by np.unique
        loc = np.searchsorted(cross_pairs[:, 0] * (n + 1) + cross_pairs[:, 1],
                              key[:, 0] * (n + 1) + key[:, 1])
        return n + loc

    out_faces = [faces[uniform]]
    out_labels = [np.where(n_cloth[uniform] == 3, CLOTH, BODY).astype(np.int8)]
    out_source = [np.nonzero(uniform)[0]]
    for k in range(3):
        k1, k2 = (k + 1) % 3, (k + 2) % 3
        for iso_cloth in (True, False):
            if iso_cloth:
                sel = np.nonzero((n_cloth == 1) & fc[:, k])[0]
            else:
                sel = np.nonzero((n_cloth == 2) & ~fc[:, k])[0]
            if len(sel) == 0:
                continue
            vk, v1, v2 = faces[sel, k], faces[sel, k1], faces[sel, k2]
            m01 = edge_vertex(vk, v1)
            m20 = edge_vertex(v2, vk)
            tri_label = CLOTH if iso_cloth else BODY
            quad_label = BODY if iso_cloth else CLOTH
            out_faces.append(np.stack([vk, m01, m20], axis=1))
            out_labels.append(np.full(len(sel), tri_label, dtype=np.int8))
            out_faces.append(np.stack([m01, v1, v2], axis=1))
            out_labels.append(np.full(len(sel), quad_label, dtype=np.int8))
            out_faces.append(np.stack([m01, v2, m20], axis=1))
            out_labels.append(np.full(len(sel), quad_label, dtype=np.int8))
            out_source += [sel, sel, sel]
    mesh = TriMesh(new_verts, np.concatenate(out_faces),
                   np.concatenate(out_labels), new_colors, validate=False)
    return SplitSurface(mesh, n, cross_pairs, u, hm, np.concatenate(out_source))
