"""Canonical-to-observed deformation of a labeled two-layer surface.

Each vertex first moves through one of two non-rigid fields — the cloth field
when every incident face is cloth, the body field otherwise (boundary-curve
vertices stay with the body so the garment opening keeps contact) — and the
result is posed by the shared linear-blend skinning model.  Skin weights are
evaluated on the canonical positions and treated as constants by the
gradient.
"""

from dataclasses import dataclass

import numpy as np

from .mesh import CLOTH, TriMesh
from .nonrigid import NonRigidField, NonRigidGrads
from .skeleton import Pose
from .skinning import BodyTemplate, SkinWeights, lbs_apply, lbs_backward


class DeformError(ValueError):
    pass


@dataclass
class DeformModels:
    """The shared skinning template plus the two non-rigid fields."""

    template: BodyTemplate
    cloth_field: NonRigidField
    body_field: NonRigidField

    def __post_init__(self):
        if self.cloth_field.n_frames != self.body_field.n_frames:
            raise DeformError("cloth and body fields disagree on frame count")


def cloth_vertex_mask(mesh: TriMesh) -> np.ndarray:
    """True where every incident face is cloth; unreferenced vertices are body."""
    if mesh.face_labels is None:
        raise DeformError("mesh has no face labels")
    touched = np.zeros(mesh.n_vertices, dtype=bool)
    touched[mesh.faces.ravel()] = True
    is_cloth = touched.copy()
    is_cloth[mesh.faces[mesh.face_labels != CLOTH].ravel()] = False  # any body face vetoes
    return is_cloth


def deform_to_observed(mesh: TriMesh, weights: SkinWeights, pose: Pose,
                       models: DeformModels, frame: int):
    """Map a canonical labeled mesh into the observed space of one frame.

    Returns ``(posed_mesh, cache)``; topology and labels are carried over
    untouched.  The cache feeds :func:`deform_backward`.
    """
    if len(weights.weights) != mesh.n_vertices:
        raise DeformError(
            f"skin weights cover {len(weights.weights)} vertices, mesh has {mesh.n_vertices}")
    cmask = cloth_vertex_mask(mesh)
    mid = mesh.vertices.copy()
    cloth_cache = body_cache = None
    if cmask.any():
        mid[cmask], cloth_cache = models.cloth_field.forward(mesh.vertices[cmask], frame)
    if (~cmask).any():
        mid[~cmask], body_cache = models.body_field.forward(mesh.vertices[~cmask], frame)
    posed, blend = lbs_apply(mid, weights, pose, models.template, return_blend=True)
    out = TriMesh(posed, mesh.faces, mesh.face_labels, mesh.vertex_colors,
                  validate=False)
    cache = {"cmask": cmask, "cloth": cloth_cache, "body": body_cache,
             "blend": blend, "frame": frame}
    return out, cache


def deform_backward(models: DeformModels, cache, d_posed: np.ndarray):
    """Pull gradients on posed vertices back to canonical vertices and models.

    Returns ``(d_canonical, cloth_grads, body_grads)`` where the field grads
    are :class:`NonRigidGrads` (or None when the layer had no vertices).
    """
    d_mid = lbs_backward(cache["blend"], np.asarray(d_posed, dtype=np.float64))
    cmask = cache["cmask"]
    d_canon = np.zeros_like(d_mid)
    cloth_grads = body_grads = None
    if cache["cloth"] is not None:
        cloth_grads = models.cloth_field.backward(cache["cloth"], d_mid[cmask])
        d_canon[cmask] = cloth_grads.d_points
    if cache["body"] is not None:
        body_grads = models.body_field.backward(cache["body"], d_mid[~cmask])
        d_canon[~cmask] = body_grads.d_points
    return d_canon, cloth_grads, body_grads
