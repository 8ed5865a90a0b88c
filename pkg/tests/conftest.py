"""Shared fixtures: small grids, analytic surfaces, and labeled test meshes."""
from __future__ import annotations

import numpy as np
import pytest

from layerfit.extraction import extract_surface
from layerfit.mesh import TriMesh
from layerfit.tetgrid import FieldState, make_grid


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def sphere_grid():
    return make_grid(20)


@pytest.fixture(scope="session")
def sphere_mesh(sphere_grid):
    """Watertight sphere of radius 0.7 extracted from the shared grid."""
    sdf = np.linalg.norm(sphere_grid.vertices, axis=1) - 0.7
    return extract_surface(sphere_grid, FieldState(sdf, np.zeros_like(sdf))).mesh


@pytest.fixture(scope="session")
def banded_sphere(sphere_mesh):
    """Sphere labeled CLOTH on the equatorial band |y| < 0.25, BODY elsewhere."""
    y = sphere_mesh.vertices[sphere_mesh.faces].mean(axis=1)[:, 1]
    labels = (np.abs(y) < 0.25).astype(np.int8)
    return sphere_mesh.with_labels(labels)


def tetra_mesh() -> TriMesh:
    """Regular tetrahedron surface: the smallest watertight mesh."""
    verts = np.array([[1.0, 1.0, 1.0], [1.0, -1.0, -1.0],
                      [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]])
    faces = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return TriMesh(verts, faces)


def perturbed(mesh: TriMesh, rng: np.random.Generator, scale: float = 1e-3) -> TriMesh:
    """Copy with jittered vertices; keeps FD checks away from symmetry points."""
    return TriMesh(mesh.vertices + rng.normal(0.0, scale, mesh.vertices.shape),
                   mesh.faces, mesh.face_labels, mesh.vertex_colors, validate=False)


def central_diff(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Dense central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f(x)
        flat[i] = keep - h
        fm = f(x)
        flat[i] = keep
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a.ravel()), np.linalg.norm(b.ravel()), 1e-12)
    return float(np.linalg.norm((a - b).ravel()) / denom)
