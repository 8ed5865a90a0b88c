"""Tetrahedral lattice scaffold and the scalar fields living on its vertices.

The reconstruction volume is a regular grid of cubes, each cut into six
tetrahedra that share the cube's main diagonal. Splitting every cube the
same way makes neighboring cubes agree on their shared-face diagonals, so
the tessellation is conforming and surface extraction cannot leak through
cell boundaries.

Two scalar fields are optimized on the grid vertices: a signed distance
``sdf`` (negative inside the watertight outer surface) and a layer field
``hm`` whose on-surface sign separates cloth from body. Both serialize to
a little-endian binary checkpoint with magic ``HMSH``. An optional RGB
field uses the same layout under magic ``HMCL``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from itertools import permutations
from pathlib import Path

import numpy as np
from scipy import sparse

FIELDS_MAGIC = b"HMSH"
COLORS_MAGIC = b"HMCL"
FIELDS_VERSION = 1

# canonical tet edges, in the order the extraction tables index them
TET_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]], dtype=np.int64)


class CheckpointError(ValueError):
    """Corrupt or incompatible field checkpoint."""


class GridError(ValueError):
    """Invalid grid construction arguments."""


@dataclass(frozen=True, eq=False)
class TetGrid:
    """Regular tetrahedral lattice over an axis-aligned box.

    ``vertices`` is ((r+1)^3, 3), ``tets`` is (6 r^3, 4) with positive
    orientation (det of edge vectors > 0). Tets are grouped per cube, so
    ``tet index % 6`` selects one of the six congruent shapes.
    """

    vertices: np.ndarray
    tets: np.ndarray
    resolution: int
    bounds: np.ndarray  # (2, 3) lo row, hi row

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    @cached_property
    def spacing(self) -> np.ndarray:
        return (self.bounds[1] - self.bounds[0]) / self.resolution

    @property
    def cell_size(self) -> float:
        """Edge length of one lattice cube (max over axes if anisotropic)."""
        return float(self.spacing.max())

    @cached_property
    def tet_volumes(self) -> np.ndarray:
        v = self.vertices
        t = self.tets
        e = np.stack([v[t[:, 1]] - v[t[:, 0]],
                      v[t[:, 2]] - v[t[:, 0]],
                      v[t[:, 3]] - v[t[:, 0]]], axis=1)
        return np.linalg.det(e) / 6.0

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected lattice edges, (e, 2) sorted pairs."""
        pairs = self.tets[:, TET_EDGES].reshape(-1, 2)
        pairs = np.sort(pairs, axis=1)
        return np.unique(pairs, axis=0)

    @cached_property
    def _grad_ops(self) -> np.ndarray:
        """(6, 3, 3) per-type matrices mapping value differences to gradients.

        For a linear field on tet (a, b, c, d) the constant spatial gradient
        g solves ``M g = [s_b - s_a, s_c - s_a, s_d - s_a]`` with M rows the
        edge vectors; all tets of one type are translates so one inverse per
        type suffices.
        """
        v = self.vertices
        mats = np.empty((6, 3, 3))
        for k in range(6):
            t = self.tets[k]
            m = np.stack([v[t[1]] - v[t[0]], v[t[2]] - v[t[0]], v[t[3]] - v[t[0]]])
            mats[k] = np.linalg.inv(m)
        return mats

    @cached_property
    def _vertex_tet_weights(self):
        """Scatter structure for volume-weighted averaging of per-tet data.

        Returns (flat vertex ids (4T,), flat weights (4T,)), where the weight
        of tet t at vertex u is V_t / sum of volumes incident to u.
        """
        t = self.tets
        vol = self.tet_volumes
        flat_ids = t.ravel()
        flat_vol = np.repeat(vol, 4)
        total = np.zeros(self.n_vertices)
        np.add.at(total, flat_ids, flat_vol)
        return flat_ids, flat_vol / total[flat_ids]

    def tet_field_gradients(self, values: np.ndarray) -> np.ndarray:
        """Constant per-tet spatial gradient of a vertex field, (T, 3)."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.n_vertices,):
            raise GridError(f"field has shape {values.shape}, want ({self.n_vertices},)")
        s = values[self.tets]
        ds = s[:, 1:] - s[:, :1]  # (T, 3)
        inv = self._grad_ops[np.arange(self.n_tets) % 6]
        return np.einsum("tij,tj->ti", inv, ds)

    @cached_property
    def _vertex_grad_mats(self):
        """Per-axis sparse operators from a vertex field to vertex gradients.

        The whole map (per-tet linear gradient, then volume-weighted average
        onto vertices) is linear, so it folds into one (n, n) CSR matrix per
        axis; its transpose is the exact backward. Built once per grid.
        """
        t = self.tets
        n_t = self.n_tets
        inv = self._grad_ops[np.arange(n_t) % 6]
        flat_ids, wgt = self._vertex_tet_weights
        avg = sparse.csr_matrix(
            (wgt, (flat_ids, np.repeat(np.arange(n_t), 4))),
            shape=(self.n_vertices, n_t))
        mats = []
        for ax in range(3):
            coef = inv[:, ax, :]  # weights of (s_b, s_c, s_d) differences
            data = np.concatenate([-coef.sum(axis=1), coef[:, 0], coef[:, 1], coef[:, 2]])
            rows = np.tile(np.arange(n_t), 4)
            cols = np.concatenate([t[:, 0], t[:, 1], t[:, 2], t[:, 3]])
            g_ax = sparse.csr_matrix((data, (rows, cols)), shape=(n_t, self.n_vertices))
            m = (avg @ g_ax).tocsr()
            m.sum_duplicates()
            mats.append((m, m.T.tocsr()))
        return mats

    def vertex_field_gradients(self, values: np.ndarray) -> np.ndarray:
        """Per-vertex field gradient: volume-weighted mean of incident tets."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.n_vertices,):
            raise GridError(f"field has shape {values.shape}, want ({self.n_vertices},)")
        return np.column_stack([m @ values for m, _ in self._vertex_grad_mats])

    def vertex_field_gradients_backward(self, d_out: np.ndarray) -> np.ndarray:
        """Backpropagate gradients on vertex_field_gradients output to values.

        ``d_out`` is (n, 3); returns (n,) gradient with respect to the field.
        """
        mats = self._vertex_grad_mats
        out = mats[0][1] @ np.ascontiguousarray(d_out[:, 0])
        for ax in (1, 2):
            out += mats[ax][1] @ np.ascontiguousarray(d_out[:, ax])
        return out


def make_grid(resolution: int, bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))) -> TetGrid:
    """Build the six-tets-per-cube lattice at the given cube resolution.

    ``resolution`` counts cubes per axis; the grid has (resolution+1)^3
    vertices and 6 resolution^3 positively oriented tets.
    """
    r = int(resolution)
    if r < 1:
        raise GridError(f"resolution must be >= 1, got {resolution}")
    lo, hi = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    if np.any(hi <= lo):
        raise GridError("bounds must satisfy hi > lo on every axis")
    ticks = np.linspace(0.0, 1.0, r + 1)
    gx, gy, gz = np.meshgrid(ticks, ticks, ticks, indexing="ij")
    unit = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    vertices = lo + unit * (hi - lo)

    # Freudenthal split: walk the cube one axis at a time in permutation
    # order; every tet keeps the main diagonal (0,0,0)-(1,1,1).
    eye = np.eye(3, dtype=np.int64)
    corner_sets = []
    for perm in permutations(range(3)):
        o = np.zeros((4, 3), dtype=np.int64)
        o[1] = eye[perm[0]]
        o[2] = eye[perm[0]] + eye[perm[1]]
        o[3] = 1
        sign = np.linalg.det(np.stack([o[1] - o[0], o[2] - o[0], o[3] - o[0]]).astype(np.float64))
        if sign < 0:
            o[[2, 3]] = o[[3, 2]]
        corner_sets.append(o)

    ax = np.arange(r)
    ci, cj, ck = np.meshgrid(ax, ax, ax, indexing="ij")
    ci, cj, ck = ci.ravel(), cj.ravel(), ck.ravel()
    n1 = r + 1
    tets = np.empty((r ** 3, 6, 4), dtype=np.int64)
    for k, o in enumerate(corner_sets):
        for c in range(4):
            tets[:, k, c] = ((ci + o[c, 0]) * n1 + (cj + o[c, 1])) * n1 + (ck + o[c, 2])
    grid = TetGrid(vertices, tets.reshape(-1, 4), r, np.stack([lo, hi]))
    return grid


@dataclass(eq=False)
class FieldState:
    """Optimizable per-grid-vertex scalars: signed distance and layer field."""

    sdf: np.ndarray
    hm: np.ndarray

    def __post_init__(self):
        self.sdf = np.asarray(self.sdf, dtype=np.float64).ravel()
        self.hm = np.asarray(self.hm, dtype=np.float64).ravel()
        if self.sdf.shape != self.hm.shape:
            raise CheckpointError("sdf and hm must have the same length")

    @classmethod
    def zeros(cls, n: int) -> "FieldState":
        return cls(np.zeros(n), np.zeros(n))

    def copy(self) -> "FieldState":
        return FieldState(self.sdf.copy(), self.hm.copy())


def save_fields(path: str | Path, state: FieldState) -> None:
    """Write sdf + hm to the versioned little-endian binary checkpoint."""
    n = len(state.sdf)
    with open(path, "wb") as fh:
        fh.write(FIELDS_MAGIC)
        fh.write(np.uint32(FIELDS_VERSION).tobytes())
        fh.write(np.uint64(n).tobytes())
        fh.write(np.ascontiguousarray(state.sdf, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(state.hm, dtype="<f8").tobytes())


def load_fields(path: str | Path) -> FieldState:
    data = Path(path).read_bytes()
    if data[:4] != FIELDS_MAGIC:
        raise CheckpointError(f"{path}: byte 0: bad magic {data[:4]!r}, want {FIELDS_MAGIC!r}")
    version = int(np.frombuffer(data, dtype="<u4", count=1, offset=4)[0])
    if version != FIELDS_VERSION:
        raise CheckpointError(f"{path}: byte 4: unsupported version {version}")
    n = int(np.frombuffer(data, dtype="<u8", count=1, offset=8)[0])
    need = 16 + 2 * 8 * n
    if len(data) < need:
        raise CheckpointError(f"{path}: byte {len(data)}: truncated, want {need} bytes")
    sdf = np.frombuffer(data, dtype="<f8", count=n, offset=16).copy()
    hm = np.frombuffer(data, dtype="<f8", count=n, offset=16 + 8 * n).copy()
    return FieldState(sdf, hm)


def save_colors(path: str | Path, colors: np.ndarray) -> None:
    """Write the (n, 3) per-grid-vertex RGB field, same layout as fields."""
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    with open(path, "wb") as fh:
        fh.write(COLORS_MAGIC)
        fh.write(np.uint32(FIELDS_VERSION).tobytes())
        fh.write(np.uint64(len(colors)).tobytes())
        fh.write(np.ascontiguousarray(colors, dtype="<f8").tobytes())


def load_colors(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != COLORS_MAGIC:
        raise CheckpointError(f"{path}: byte 0: bad magic {data[:4]!r}, want {COLORS_MAGIC!r}")
    version = int(np.frombuffer(data, dtype="<u4", count=1, offset=4)[0])
    if version != FIELDS_VERSION:
        raise CheckpointError(f"{path}: byte 4: unsupported version {version}")
    n = int(np.frombuffer(data, dtype="<u8", count=1, offset=8)[0])
    need = 16 + 24 * n
    if len(data) < need:
        raise CheckpointError(f"{path}: byte {len(data)}: truncated, want {need} bytes")
    return np.frombuffer(data, dtype="<f8", count=3 * n, offset=16).reshape(n, 3).copy()
