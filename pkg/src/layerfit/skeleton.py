"""Articulated capsule-limb skeleton: rest shape, poses, kinematics.

The body prior is a hand-built humanoid of capsules (limbs, neck) and one
ellipsoid (torso) hung on a joint tree. It provides three things: an
analytic signed distance used to initialize the optimizable fields, a
watertight template surface (meshed elsewhere), and the per-joint transforms
that drive linear blend skinning. Joints are topologically sorted (parent
index < child index) and posed by unit quaternions plus a root translation.

Rotating joint j spins everything below it about j's pivot; the skinning
transform of a joint therefore maps rest space to posed space and is the
identity at the rest pose.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np


class SkeletonError(ValueError):
    """Invalid skeleton topology or pose data."""


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from unit quaternions in (w, x, y, z) order."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def quat_about_axis(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


@dataclass(frozen=True, eq=False)
class Skeleton:
    """Joint tree with capsule limbs and an optional torso ellipsoid.

    ``offsets[j]`` is joint j's rest position relative to its parent (the
    root's offset is absolute). ``bone_radii[j]`` > 0 puts a capsule of that
    radius along the parent-to-j segment. The torso ellipsoid is centered at
    ``torso_center`` with semi-axes ``torso_axes`` and rides with the root.
    """

    names: tuple
    parents: np.ndarray
    offsets: np.ndarray
    bone_radii: np.ndarray
    torso_center: np.ndarray | None = None
    torso_axes: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "parents", np.asarray(self.parents, dtype=np.int64))
        object.__setattr__(self, "offsets", np.asarray(self.offsets, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "bone_radii", np.asarray(self.bone_radii, dtype=np.float64))
        if self.torso_center is not None:
            object.__setattr__(self, "torso_center", np.asarray(self.torso_center, dtype=np.float64))
            object.__setattr__(self, "torso_axes", np.asarray(self.torso_axes, dtype=np.float64))
        j = len(self.parents)
        if not (len(self.offsets) == len(self.bone_radii) == len(self.names) == j):
            raise SkeletonError("joint array lengths disagree")
        if self.parents[0] != -1 or np.any(self.parents[1:] >= np.arange(1, j)):
            raise SkeletonError("joints must be topologically sorted with parents first")

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @cached_property
    def rest_positions(self) -> np.ndarray:
        pos = np.zeros((self.n_joints, 3))
        for j in range(self.n_joints):
            p = self.parents[j]
            pos[j] = self.offsets[j] + (pos[p] if p >= 0 else 0.0)
        return pos

    @cached_property
    def bone_segments(self):
        """Capsule limbs as (parent joint index, rest endpoints a, b, radius)."""
        out = []
        pos = self.rest_positions
        for j in range(self.n_joints):
            if self.bone_radii[j] > 0 and self.parents[j] >= 0:
                p = int(self.parents[j])
                out.append((p, pos[p], pos[j], float(self.bone_radii[j])))
        return out


@dataclass(eq=False)
class Pose:
    """One frame of articulation: local unit quaternions + root translation."""

    quats: np.ndarray
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(-1, 4)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64).reshape(3)
        norms = np.linalg.norm(self.quats, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise SkeletonError(f"pose quaternions must be unit (worst |q|-1 = {np.abs(norms-1).max():.2e})")


def identity_pose(skel: Skeleton) -> Pose:
    q = np.zeros((skel.n_joints, 4))
    q[:, 0] = 1.0
    return Pose(q)


def joint_transforms(skel: Skeleton, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Global posed transforms per joint: rotations (J,3,3) and origins (J,3)."""
    if len(pose.quats) != skel.n_joints:
        raise SkeletonError(f"pose has {len(pose.quats)} joints, skeleton {skel.n_joints}")
    local_r = quat_to_matrix(pose.quats)
    rot = np.empty((skel.n_joints, 3, 3))
    org = np.empty((skel.n_joints, 3))
    for j in range(skel.n_joints):
        p = skel.parents[j]
        if p < 0:
            rot[j] = local_r[j]
            org[j] = skel.offsets[j] + pose.root_translation
        else:
            rot[j] = rot[p] @ local_r[j]
            org[j] = rot[p] @ skel.offsets[j] + org[p]
    return rot, org


def skinning_transforms(skel: Skeleton, pose: Pose) -> np.ndarray:
    """Per-joint rest-to-posed maps as (J, 3, 4) [R | t] blocks.

    Joint j's map sends rest point x to ``R_j (x - p_j) + o_j`` with p_j the
    rest pivot and o_j the posed pivot, so the rest pose maps every point to
    itself exactly.
    """
    rot, org = joint_transforms(skel, pose)
    rest = skel.rest_positions
    out = np.empty((skel.n_joints, 3, 4))
    out[:, :, :3] = rot
    out[:, :, 3] = org - np.einsum("jab,jb->ja", rot, rest)
    return out


# -- analytic template shape --------------------------------------------


def _segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip((points - a) @ ab / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(points - a - t[:, None] * ab, axis=1)


def _ellipsoid_sdf(points: np.ndarray, center: np.ndarray, axes: np.ndarray) -> np.ndarray:
    # scaled-space approximation; exact sign, distance good near the surface
    p = (points - center) / axes
    k0 = np.linalg.norm(p, axis=1)
    k1 = np.linalg.norm(p / axes, axis=1)
    out = np.where(k1 > 0, k0 * (k0 - 1.0) / np.maximum(k1, 1e-30), -axes.min())
    return out


def template_sdf(skel: Skeleton, points: np.ndarray) -> np.ndarray:
    """Signed distance to the rest-pose template: union of capsules + torso."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    best = np.full(len(points), np.inf)
    for _, a, b, r in skel.bone_segments:
        np.minimum(best, _segment_distance(points, a, b) - r, out=best)
    if skel.torso_center is not None:
        np.minimum(best, _ellipsoid_sdf(points, skel.torso_center, skel.torso_axes), out=best)
    return best


def build_humanoid(scale: float = 1.0) -> Skeleton:
    """Default A-pose humanoid, about 1.6 m tall, feet near y = -0.8.

    Mirror-symmetric in x. The figure is centered so it fits a unit-radius
    reconstruction volume; ``scale`` resizes everything uniformly.
    """
    s = scale
    names = ("pelvis", "spine", "head",
             "l_hip", "l_knee", "l_ankle",
             "r_hip", "r_knee", "r_ankle",
             "l_shoulder", "l_elbow", "l_wrist",
             "r_shoulder", "r_elbow", "r_wrist")
    parents = [-1, 0, 1, 0, 3, 4, 0, 6, 7, 1, 9, 10, 1, 12, 13]
    offsets = np.array([
        [0.00, 0.15, 0.00],    # pelvis (root, absolute)
        [0.00, 0.33, 0.00],    # spine top / chest
        [0.00, 0.22, 0.00],    # head center
        [-0.09, -0.03, 0.00],  # l_hip
        [0.00, -0.40, 0.00],   # l_knee
        [0.00, -0.40, 0.00],   # l_ankle
        [0.09, -0.03, 0.00],   # r_hip
        [0.00, -0.40, 0.00],   # r_knee
        [0.00, -0.40, 0.00],   # r_ankle
        [-0.19, -0.02, 0.00],  # l_shoulder
        [-0.10, -0.25, 0.00],  # l_elbow (A-pose, arm angled out)
        [-0.08, -0.22, 0.00],  # l_wrist
        [0.19, -0.02, 0.00],   # r_shoulder
        [0.10, -0.25, 0.00],   # r_elbow
        [0.08, -0.22, 0.00],   # r_wrist
    ]) * s
    radii = np.array([0.0, 0.0, 0.085,
                      0.0, 0.065, 0.05,
                      0.0, 0.065, 0.05,
                      0.0, 0.048, 0.038,
                      0.0, 0.048, 0.038]) * s
    skel = Skeleton(names, parents, offsets, radii,
                    torso_center=np.array([0.0, 0.33, 0.0]) * s,
                    torso_axes=np.array([0.17, 0.30, 0.11]) * s)
    return skel


# -- pose sequence IO ----------------------------------------------------


def save_poses(path: str | Path, poses: list[Pose], joint_names=None) -> None:
    doc = {"frames": [{"quaternions": p.quats.tolist(),
                       "root_translation": p.root_translation.tolist()} for p in poses]}
    if joint_names is not None:
        doc["joint_names"] = list(joint_names)
    Path(path).write_text(json.dumps(doc, indent=1))


def load_poses(path: str | Path) -> list[Pose]:
    try:
        doc = json.loads(Path(path).read_text())
        return [Pose(np.array(f["quaternions"]), np.array(f["root_translation"]))
                for f in doc["frames"]]
    except (KeyError, json.JSONDecodeError) as exc:
        raise SkeletonError(f"{path}: invalid pose file: {exc}") from exc
