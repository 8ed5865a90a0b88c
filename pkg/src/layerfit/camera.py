"""Pinhole camera: intrinsics, world-to-camera pose, projection, JSON IO.

Convention: camera space has +z looking forward, +x right, +y down; a
world point maps to ``x_cam = R x_world + t`` and projects to pixel
``(u, v) = (fx x/z + cx, fy y/z + cy)``. Pixel centers sit at integer
coordinates plus one half. Depth is the camera-space z in meters. Surfaces
facing the camera have camera-space normals near (0, 0, -1).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class CameraError(ValueError):
    """Invalid camera parameters or file."""


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if self.fx <= 0 or self.fy <= 0:
            raise CameraError("focal lengths must be positive")
        if self.width < 8 or self.height < 8:
            raise CameraError("image size must be at least 8x8")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6:
            raise CameraError(f"rotation is not orthonormal (err {err:.2e})")

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates (n, 2) and camera-space depths (n,)."""
        cam = self.to_camera(points)
        z = cam[:, 2]
        uv = np.empty((len(cam), 2))
        uv[:, 0] = self.fx * cam[:, 0] / z + self.cx
        uv[:, 1] = self.fy * cam[:, 1] / z + self.cy
        return uv, z

    def project_backward(self, points: np.ndarray, d_uv: np.ndarray,
                         d_z: np.ndarray) -> np.ndarray:
        """World-space gradients from pixel and depth gradients."""
        cam = self.to_camera(points)
        x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
        d_cam = np.empty_like(cam)
        d_cam[:, 0] = d_uv[:, 0] * self.fx / z
        d_cam[:, 1] = d_uv[:, 1] * self.fy / z
        d_cam[:, 2] = (-d_uv[:, 0] * self.fx * x / z ** 2
                       - d_uv[:, 1] * self.fy * y / z ** 2 + d_z)
        return d_cam @ self.rotation

    def to_json(self, path: str | Path) -> None:
        doc = {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
               "width": self.width, "height": self.height,
               "rotation": self.rotation.tolist(),
               "translation": self.translation.tolist()}
        Path(path).write_text(json.dumps(doc, indent=1))

    @classmethod
    def from_json(cls, path: str | Path) -> "Camera":
        try:
            doc = json.loads(Path(path).read_text())
            return cls(doc["fx"], doc["fy"], doc["cx"], doc["cy"],
                       doc["width"], doc["height"],
                       np.array(doc["rotation"]), np.array(doc["translation"]))
        except (KeyError, json.JSONDecodeError) as exc:
            raise CameraError(f"{path}: invalid camera file: {exc}") from exc


def look_at(eye, target, up=(0.0, 1.0, 0.0), fov_deg: float = 45.0,
            width: int = 128, height: int = 128) -> Camera:
    """Camera at ``eye`` looking toward ``target`` with a vertical field of view."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        raise CameraError("up vector parallel to view direction")
    right /= nr
    down = np.cross(fwd, right)  # +y down in camera space
    rot = np.stack([right, down, fwd])
    trans = -rot @ eye
    f = 0.5 * height / np.tan(np.radians(fov_deg) * 0.5)
    return Camera(f, f, width * 0.5, height * 0.5, width, height, rot, trans)
