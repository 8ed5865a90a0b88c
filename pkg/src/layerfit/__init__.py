"""Two-layer surface reconstruction: garment and body from masked multi-view video.

A tetrahedral-grid signed distance field is optimized jointly with an
on-surface layer field that splits the watertight surface into cloth and
body sheets, plus per-frame deformation (skeletal skinning and two
non-rigid refinement fields). Rendering, losses, and optimization are all
plain numpy with hand-written gradients, so runs are deterministic.
"""

__version__ = "0.1.0"

from .mesh import BODY, CLOTH, TriMesh

__all__ = ["BODY", "CLOTH", "TriMesh", "__version__"]
