"""Label cleanup on split surfaces: keep dominant regions, absorb slivers.

Optimizing the layer field can leave isolated islands of one label inside
the other (a patch of "cloth" on a forearm, say). This pass keeps the
requested number of largest edge-connected components per class, ranked by
unique vertex count, and flips every remaining face to the opposite class.
With two classes, flipping into the surrounding label and absorbing into a
neighbor region are the same operation. Running the pass twice changes
nothing: flipped slivers merge into kept regions, which only grow.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import BODY, CLOTH, TriMesh, connected_components, weld_vertices


@dataclass(frozen=True)
class AggregationReport:
    """What the cleanup pass did: component census and flip/weld counts."""

    body_components_before: int
    cloth_components_before: int
    body_components_kept: int
    cloth_components_kept: int
    faces_flipped: int
    vertices_welded: int


def aggregate(mesh: TriMesh, keep_body: int = 1, keep_cloth: int = 1,
              weld_tol: float = 1e-9) -> tuple[TriMesh, AggregationReport]:
    """Reduce each label class to its largest components; flip the rest.

    Components are ranked by unique vertex count, ties broken by smallest
    minimum face index, so the result is deterministic. Duplicated vertex
    positions (within ``weld_tol``) left over from degenerate cuts are
    merged afterwards.
    """
    if mesh.face_labels is None:
        raise ValueError("aggregate requires face labels")
    if keep_body < 1 or keep_cloth < 1:
        raise ValueError("keep_body and keep_cloth must be >= 1")
    labels = mesh.face_labels.copy()
    body = connected_components(mesh, BODY)
    cloth = connected_components(mesh, CLOTH)
    flipped = 0
    for comp in body.components[keep_body:]:
        labels[comp] = CLOTH
        flipped += len(comp)
    for comp in cloth.components[keep_cloth:]:
        labels[comp] = BODY
        flipped += len(comp)
    out = mesh.with_labels(labels)
    welded = 0
    if weld_tol > 0:
        out, welded = weld_vertices(out, weld_tol)
    report = AggregationReport(
        body_components_before=len(body.components),
        cloth_components_before=len(cloth.components),
        body_components_kept=min(keep_body, len(body.components)),
        cloth_components_kept=min(keep_cloth, len(cloth.components)),
        faces_flipped=flipped,
        vertices_welded=welded,
    )
    return out, report
