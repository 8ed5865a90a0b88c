"""Skin-weight computation and linear blend skinning.

The body template couples the skeleton with a watertight surface mesh of
its analytic shape. Each template-surface vertex carries a convex weight
vector over joints, blended from its two nearest limb segments; weights for
arbitrary query points (grid surface vertices, garment vertices) are then
diffused from the K nearest template-surface vertices by inverse distance.
This keeps the garment moving with the body part it actually hangs on.

Skinning itself is the standard convex blend of per-joint rigid maps:
``x' = sum_j w_j (R_j x + t_j)``. The backward pass reuses the blended
linear map, so gradients are exact.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from .mesh import TriMesh
from .skeleton import Pose, Skeleton, SkeletonError, build_humanoid, skinning_transforms, template_sdf
from .tetgrid import make_grid, FieldState
from .extraction import extract_surface

K_NEIGHBORS = 4


@dataclass(eq=False)
class SkinWeights:
    """Convex per-point weights over joints, at most ``K_NEIGHBORS`` nonzero.

    ``far_mask`` flags points that were beyond the diffusion radius and got
    a plain nearest-vertex copy.
    """

    weights: np.ndarray
    far_mask: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.far_mask = np.asarray(self.far_mask, dtype=bool).ravel()
        w = self.weights
        if np.any(w < -1e-12):
            raise SkeletonError("skin weights must be non-negative")
        if np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-9):
            raise SkeletonError("skin weights must sum to 1")
        if np.any((w > 0).sum(axis=1) > K_NEIGHBORS):
            raise SkeletonError(f"more than {K_NEIGHBORS} nonzero weights on a point")


@dataclass(eq=False)
class BodyTemplate:
    """Skeleton + meshed surface + per-surface-vertex skin weights."""

    skeleton: Skeleton
    surface: TriMesh
    vertex_weights: np.ndarray

    def __post_init__(self):
        if len(self.vertex_weights) != self.surface.n_vertices:
            raise SkeletonError("vertex_weights must align with surface vertices")

    @cached_property
    def _tree(self) -> cKDTree:
        return cKDTree(self.surface.vertices)

    @property
    def shape_radii(self) -> np.ndarray:
        """Per-segment capsule radii (the shape scalars of the template)."""
        return self.skeleton.bone_radii

    @property
    def shape_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.skeleton.offsets, axis=1)


def _segment_axis_distances(skel: Skeleton, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distances from points to each influencer segment axis, plus the joint
    each influencer hands its weight to (the segment's parent joint)."""
    segs = list(skel.bone_segments)
    joints = [p for p, _, _, _ in segs]
    axes = [(a, b) for _, a, b, _ in segs]
    if skel.torso_center is not None:
        # torso counts as a segment along its vertical axis, owned by the root
        c, ay = skel.torso_center, skel.torso_axes[1]
        axes.append((c - [0, 0.6 * ay, 0], c + [0, 0.6 * ay, 0]))
        joints.append(0)
    d = np.empty((len(points), len(axes)))
    for k, (a, b) in enumerate(axes):
        ab = np.asarray(b) - np.asarray(a)
        t = np.clip((points - a) @ ab / (ab @ ab), 0.0, 1.0)
        d[:, k] = np.linalg.norm(points - a - t[:, None] * ab, axis=1)
    return d, np.array(joints)


def _bone_blend_weights(skel: Skeleton, points: np.ndarray) -> np.ndarray:
    """Convex joint weights from the two nearest limb axes, inverse-distance."""
    d, owner = _segment_axis_distances(skel, points)
    n = len(points)
    order = np.argsort(d, axis=1, kind="stable")[:, :2]
    rows = np.arange(n)[:, None]
    dd = d[rows, order]
    inv = 1.0 / (dd + 1e-6)
    inv /= inv.sum(axis=1, keepdims=True)
    w = np.zeros((n, skel.n_joints))
    for c in range(2):
        np.add.at(w, (np.arange(n), owner[order[:, c]]), inv[:, c])
    return w


def build_template(skel: Skeleton | None = None, resolution: int = 40) -> BodyTemplate:
    """Mesh the analytic template shape and attach skin weights.

    The surface comes from running the field extractor over the analytic
    signed distance on a local lattice, so it is watertight by construction.
    """
    if skel is None:
        skel = build_humanoid()
    pos = skel.rest_positions
    pad = skel.bone_radii.max() + 0.12
    lo = pos.min(axis=0) - pad
    hi = pos.max(axis=0) + pad
    if skel.torso_center is not None:
        lo = np.minimum(lo, skel.torso_center - skel.torso_axes - 0.05)
        hi = np.maximum(hi, skel.torso_center + skel.torso_axes + 0.05)
    grid = make_grid(resolution, (lo, hi))
    sdf = template_sdf(skel, grid.vertices)
    surface = extract_surface(grid, FieldState(sdf, np.zeros_like(sdf))).mesh
    surface = TriMesh(surface.vertices, surface.faces)  # validated copy
    weights = _bone_blend_weights(skel, surface.vertices)
    return BodyTemplate(skel, surface, weights)


def compute_skin_weights(points: np.ndarray, template: BodyTemplate,
                         k: int = K_NEIGHBORS, far_radius: float = 0.1) -> SkinWeights:
    """Diffuse template-surface weights to arbitrary points.

    Each point blends the weight vectors of its ``k`` nearest template
    vertices with inverse-distance coefficients, then keeps only its largest
    ``K_NEIGHBORS`` joint entries (renormalized) so the sparsity contract
    holds. A point exactly on a template vertex copies that vertex's weights.
    Points farther than ``far_radius`` from the template copy their single
    nearest vertex and are flagged.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dist, idx = template._tree.query(points, k=k)
    dist = np.atleast_2d(dist)
    idx = np.atleast_2d(idx)
    vw = template.vertex_weights
    exact = dist[:, 0] <= 1e-12
    far = dist[:, 0] > far_radius
    inv = 1.0 / np.maximum(dist, 1e-12)
    inv /= inv.sum(axis=1, keepdims=True)
    w = np.einsum("nk,nkj->nj", inv, vw[idx])
    copy_rows = exact | far
    w[copy_rows] = vw[idx[copy_rows, 0]]
    # sparsify to the K largest joints per point, keep convexity
    j = w.shape[1]
    if j > K_NEIGHBORS:
        order = np.argsort(w, axis=1, kind="stable")
        w[np.arange(len(w))[:, None], order[:, :j - K_NEIGHBORS]] = 0.0
        w /= w.sum(axis=1, keepdims=True)
    return SkinWeights(w, far)


def lbs_apply(points: np.ndarray, weights: SkinWeights, pose: Pose,
              template: BodyTemplate, return_blend: bool = False):
    """Pose points by blending per-joint rigid transforms.

    Returns the deformed points; with ``return_blend`` also the blended
    rotation blocks (n, 3, 3) needed by ``lbs_backward``.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    w = weights.weights
    if len(w) != len(points):
        raise SkeletonError(f"{len(w)} weight rows for {len(points)} points")
    mats = skinning_transforms(template.skeleton, pose)  # (J, 3, 4)
    blend = np.einsum("nj,jab->nab", w, mats)  # (n, 3, 4)
    out = np.einsum("nab,nb->na", blend[:, :, :3], points) + blend[:, :, 3]
    if return_blend:
        return out, blend[:, :, :3]
    return out


def lbs_backward(blend_rot: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    """Gradient of lbs_apply output with respect to the input points."""
    return np.einsum("nba,nb->na", blend_rot, np.asarray(d_out))
