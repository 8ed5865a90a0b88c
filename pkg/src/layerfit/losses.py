"""Loss terms driving the two-stage reconstruction, with analytic gradients.

Image terms compare per-layer render buffers against supervision inside a
validity mask; field terms regularize the signed-distance and layer fields on
the tetrahedral grid; geometric terms keep the garment outside the body and
the deformed surfaces smooth.  Every op returns its scalar value together
with gradients for the arrays it consumes directly — composition through the
extraction / deformation / rasterization chain is the caller's job.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .mesh import TriMesh, laplacian_energy, normal_consistency_energy
from .tetgrid import TetGrid

STAGE_TEMPLATE = "template"
STAGE_DETAIL = "detail"

# Which terms are live in each optimization stage.  The filter is absolute:
# a term outside its stage contributes exactly zero even with a nonzero weight.
STAGE_TERMS = {
    STAGE_TEMPLATE: ("color", "mask", "eikonal", "hole_open", "hole_reg"),
    STAGE_DETAIL: ("color", "mask", "normal", "collision", "n_consist", "laplacian"),
}

PYRAMID_LEVELS = 4
NU_BAND = 0.02  # half-width of the boundary band used by hole_reg_loss


class ObjectiveError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    """Non-negative weight per term plus the shared loss constants."""

    color: float = 1.0
    mask: float = 1.0
    normal: float = 0.5
    eikonal: float = 0.1
    hole_open: float = 0.05
    hole_reg: float = 0.05
    collision: float = 1.0
    n_consist: float = 0.01
    laplacian: float = 0.01
    k_collision: float = 25.0
    eps1: float = 0.01  # opening-size target for hole_reg_loss
    eps2: float = 0.005  # collision clearance
    huber_delta: float = 0.01
    hole_open_flip: bool = False  # penalize nu <= 0 instead of nu >= 0

    def __post_init__(self):
        for name in ("color", "mask", "normal", "eikonal", "hole_open",
                     "hole_reg", "collision", "n_consist", "laplacian",
                     "k_collision", "eps1", "eps2", "huber_delta"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ObjectiveError(f"weight {name!r} must be non-negative, got {v}")

    def term_weight(self, name: str) -> float:
        return float(getattr(self, name))


@dataclass(frozen=True)
class PixelSets:
    """Validity mask and per-layer comparison indicators.

    ``valid`` is the dilated union of the supervision masks.  ``body`` marks
    valid pixels where the body render is comparable (not claimed by the cloth
    supervision); ``cloth`` likewise.  Both indicators can hold at once.
    """

    valid: np.ndarray
    body: np.ndarray
    cloth: np.ndarray

    @property
    def count(self) -> int:
        return int(self.valid.sum())


def build_pixel_sets(mask_body: np.ndarray, mask_cloth: np.ndarray,
                     dilation: int = 2) -> PixelSets:
    """Derive the valid-pixel set from the two supervision masks.

    The union of both masks is dilated ``dilation`` steps (4-connected) so a
    thin rim of background pixels stays in play and silhouette gradients do
    not vanish at the boundary.
    """
    mb = np.asarray(mask_body, dtype=bool)
    mc = np.asarray(mask_cloth, dtype=bool)
    if mb.shape != mc.shape or mb.ndim != 2:
        raise ObjectiveError(f"mask shapes {mb.shape} vs {mc.shape}")
    union = mb | mc
    if dilation > 0:
        valid = ndimage.binary_dilation(union, iterations=dilation)
    else:
        valid = union
    return PixelSets(valid=valid, body=valid & ~mc, cloth=valid & ~mb)


@dataclass
class LossReport:
    """Per-term values, the weighted total, and gradient norms per block."""

    stage: str
    terms: dict = field(default_factory=dict)
    total: float = 0.0
    grad_norms: dict = field(default_factory=dict)

    def line(self) -> dict:
        out = {"stage": self.stage, "total": self.total}
        out.update(self.terms)
        return out


# ---------------------------------------------------------------------------
# image-space terms


def color_loss(pred_body, pred_cloth, true_body, true_cloth, pixels: PixelSets):
    """Masked per-layer squared RGB error, channel-mean per pixel.

    Returns ``(value, d_pred_body, d_pred_cloth)``.  Each valid pixel adds
    its body-layer mse where the body indicator holds and its cloth-layer mse
    where the cloth indicator holds; the sum is normalized by ``|P|``.
    """
    pb, pc = np.asarray(pred_body, float), np.asarray(pred_cloth, float)
    tb, tc = np.asarray(true_body, float), np.asarray(true_cloth, float)
    if pb.shape != tb.shape or pc.shape != tc.shape or pb.shape[:2] != pixels.valid.shape:
        raise ObjectiveError(
            f"buffer shapes {pb.shape}/{pc.shape} do not match supervision "
            f"{tb.shape}/{tc.shape} on grid {pixels.valid.shape}")
    n = max(pixels.count, 1)
    db = pb - tb
    dc = pc - tc
    wb = pixels.body[..., None].astype(float)
    wc = pixels.cloth[..., None].astype(float)
    nc = pb.shape[-1]
    value = float((np.sum(wb * db * db) + np.sum(wc * dc * dc)) / (nc * n))
    g_b = (2.0 / (nc * n)) * wb * db
    g_c = (2.0 / (nc * n)) * wc * dc
    return value, g_b, g_c


def mask_loss(label_body, label_cloth, mask_body, mask_cloth, pixels: PixelSets):
    """Masked squared error between rendered coverage and supervision masks.

    Returns ``(value, d_label_body, d_label_cloth)``.  Same gating and
    normalization as :func:`color_loss` on the single-channel label buffers.
    """
    lb, lc = np.asarray(label_body, float), np.asarray(label_cloth, float)
    mb = np.asarray(mask_body, float)
    mc = np.asarray(mask_cloth, float)
    if lb.shape != mb.shape or lc.shape != mc.shape or lb.shape != pixels.valid.shape:
        raise ObjectiveError(f"label shapes {lb.shape}/{lc.shape} vs masks "
                             f"{mb.shape}/{mc.shape} on grid {pixels.valid.shape}")
    n = max(pixels.count, 1)
    db = lb - mb
    dc = lc - mc
    wb = pixels.body.astype(float)
    wc = pixels.cloth.astype(float)
    value = float((np.sum(wb * db * db) + np.sum(wc * dc * dc)) / n)
    return value, (2.0 / n) * wb * db, (2.0 / n) * wc * dc


_PYR_CACHE: dict = {}


def _pyramid_matrix(n: int) -> np.ndarray:
    """One-axis blur-and-halve operator (ceil(n/2) x n), binomial 1-4-6-4-1.

    Symmetric edge padding keeps row sums at one, so constants survive every
    level unchanged.
    """
    key = n
    if key in _PYR_CACHE:
        return _PYR_CACHE[key]
    kernel = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
    blur = np.zeros((n, n))
    for i in range(n):
        for k, w in enumerate(kernel):
            j = i + k - 2
            if j < 0:
                j = -j - 1  # symmetric padding
            elif j >= n:
                j = 2 * n - j - 1
            blur[i, j] += w
    sel = np.arange(0, n, 2)
    op = blur[sel]
    _PYR_CACHE[key] = op
    return op


def gaussian_pyramid(image: np.ndarray, levels: int = PYRAMID_LEVELS):
    """List of ``levels`` progressively blurred and halved copies (level 0 raw)."""
    img = np.asarray(image, dtype=np.float64)
    out = [img]
    for _ in range(levels - 1):
        h, w = img.shape[:2]
        if min(h, w) < 2:
            break
        ry = _pyramid_matrix(h)
        rx = _pyramid_matrix(w)
        img = np.einsum("ph,hwc,qw->pqc", ry, img, rx)
        out.append(img)
    return out


def normal_loss(pred: np.ndarray, true: np.ndarray, levels: int = PYRAMID_LEVELS):
    """Multi-scale squared normal-image difference.

    Each pyramid level contributes the pixel-mean of the per-pixel squared
    channel sum; the four levels are added.  Returns ``(value, d_pred)``.
    """
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(true, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 3:
        raise ObjectiveError(f"normal buffers {p.shape} vs {t.shape}")
    pyr_p = gaussian_pyramid(p, levels)
    pyr_t = gaussian_pyramid(t, levels)
    value = 0.0
    d_levels = []
    for lp, lt in zip(pyr_p, pyr_t):
        diff = lp - lt
        npx = lp.shape[0] * lp.shape[1]
        value += float(np.sum(diff * diff) / npx)
        d_levels.append(2.0 * diff / npx)
    # pull each level's gradient back through the blur-and-halve transposes
    grad = d_levels[-1]
    for lev in range(len(d_levels) - 2, -1, -1):
        h, w = pyr_p[lev].shape[:2]
        ry = _pyramid_matrix(h)
        rx = _pyramid_matrix(w)
        grad = np.einsum("ph,pqc,qw->hwc", ry, grad, rx) + d_levels[lev]
    return value, grad


# ---------------------------------------------------------------------------
# field terms


def eikonal_loss(grid: TetGrid, sdf: np.ndarray):
    """Unit-gradient penalty summed over all grid vertices.

    Uses the volume-weighted vertex gradient of the signed-distance field;
    vertices with exactly zero gradient take subgradient zero.  Returns
    ``(value, d_sdf)``.
    """
    g = grid.vertex_field_gradients(sdf)
    norms = np.linalg.norm(g, axis=1)
    value = float(np.sum((norms - 1.0) ** 2))
    nz = norms > 0
    d_g = np.zeros_like(g)
    d_g[nz] = (2.0 * (norms[nz] - 1.0) / norms[nz])[:, None] * g[nz]
    return value, grid.vertex_field_gradients_backward(d_g)


def huber(x: np.ndarray, delta: float):
    """Elementwise Huber value and derivative: quadratic core, linear tails."""
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    quad = a <= delta
    val = np.where(quad, 0.5 * x * x, delta * (a - 0.5 * delta))
    der = np.where(quad, x, delta * np.sign(x))
    return val, der


def hole_open_loss(nu: np.ndarray, weights: LossWeights):
    """Huber penalty on the non-negative layer-field values of surface vertices.

    The printed objective sums over ``nu >= 0``; with ``hole_open_flip`` the
    sum runs over ``nu <= 0`` instead (the prose reading).  Returns
    ``(value, d_nu)``.
    """
    nu = np.asarray(nu, dtype=np.float64)
    sel = nu <= 0 if weights.hole_open_flip else nu >= 0
    val, der = huber(nu, weights.huber_delta)
    d_nu = np.where(sel, der, 0.0)
    return float(val[sel].sum()), d_nu


def hole_reg_loss(nu: np.ndarray, weights: LossWeights):
    """Keep layer-boundary vertices near the opening target ``eps1``.

    Applies Huber(nu - eps1) to vertices in the band ``|nu| < NU_BAND`` — the
    discrete stand-in for the measure-zero boundary curve.  Returns
    ``(value, d_nu)``.
    """
    nu = np.asarray(nu, dtype=np.float64)
    band = np.abs(nu) < NU_BAND
    val, der = huber(nu - weights.eps1, weights.huber_delta)
    d_nu = np.where(band, der, 0.0)
    return float(val[band].sum()), d_nu


# ---------------------------------------------------------------------------
# collision


REGION_A, REGION_B, REGION_C = 0, 1, 2
REGION_AB, REGION_AC, REGION_BC = 3, 4, 5
REGION_FACE = 6


def _closest_point_on_triangles(p: np.ndarray, tri: np.ndarray):
    """Closest point on each triangle; ``p`` (..., 3), ``tri`` (..., 3, 3).

    Also returns the feature region (vertex / edge / interior codes above)
    containing the closest point; lower-dimensional features win ties so the
    region always names a feature the point lies on.
    """
    a, b, c = tri[..., 0, :], tri[..., 1, :], tri[..., 2, :]
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.sum(ab * ap, -1)
    d2 = np.sum(ac * ap, -1)
    bp = p - b
    d3 = np.sum(ab * bp, -1)
    d4 = np.sum(ac * bp, -1)
    cp = p - c
    d5 = np.sum(ab * cp, -1)
    d6 = np.sum(ac * cp, -1)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    def safe(num, den):
        return num / np.where(den == 0.0, 1.0, den)

    t_ab = np.clip(safe(d1, d1 - d3), 0.0, 1.0)[..., None]
    t_ac = np.clip(safe(d2, d2 - d6), 0.0, 1.0)[..., None]
    t_bc = np.clip(safe(d4 - d3, (d4 - d3) + (d5 - d6)), 0.0, 1.0)[..., None]
    denom = va + vb + vc
    v = safe(vb, denom)[..., None]
    w = safe(vc, denom)[..., None]

    out = a + ab * v + ac * w  # interior fallback
    region = np.full(p.shape[:-1], REGION_FACE, dtype=np.int8)
    m_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    out = np.where(m_bc[..., None], b + (c - b) * t_bc, out)
    region = np.where(m_bc, REGION_BC, region)
    m_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    out = np.where(m_ac[..., None], a + ac * t_ac, out)
    region = np.where(m_ac, REGION_AC, region)
    m_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    out = np.where(m_ab[..., None], a + ab * t_ab, out)
    region = np.where(m_ab, REGION_AB, region)
    m_c = (d6 >= 0) & (d5 <= d6)
    out = np.where(m_c[..., None], c, out)
    region = np.where(m_c, REGION_C, region)
    m_b = (d3 >= 0) & (d4 <= d3)
    out = np.where(m_b[..., None], b, out)
    region = np.where(m_b, REGION_B, region)
    m_a = (d1 <= 0) & (d2 <= 0)
    out = np.where(m_a[..., None], a, out)
    region = np.where(m_a, REGION_A, region)
    return out, region


def _face_unit_normals(mesh: TriMesh) -> np.ndarray:
    cross = mesh.face_cross
    return cross / np.maximum(np.linalg.norm(cross, axis=1), 1e-300)[:, None]


def _angle_weighted_vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Pseudonormal at each vertex: incident face normals weighted by the
    interior angle the face subtends there (unnormalized; only the direction
    matters for sign tests)."""
    tri = mesh.vertices[mesh.faces]
    fn = _face_unit_normals(mesh)
    out = np.zeros_like(mesh.vertices)
    for k in range(3):
        u = tri[:, (k + 1) % 3] - tri[:, k]
        w = tri[:, (k + 2) % 3] - tri[:, k]
        cu = np.maximum(np.linalg.norm(u, axis=1), 1e-300)
        cw = np.maximum(np.linalg.norm(w, axis=1), 1e-300)
        cos = np.clip(np.sum(u * w, axis=1) / (cu * cw), -1.0, 1.0)
        ang = np.arccos(cos)
        np.add.at(out, mesh.faces[:, k], ang[:, None] * fn)
    return out


def _edge_neighbor_faces(mesh: TriMesh) -> np.ndarray:
    """(F, 3) face index across local edges (AB, AC, BC); -1 on boundary."""
    f = mesh.faces
    pairs = np.stack([f[:, (0, 1)], f[:, (0, 2)], f[:, (1, 2)]], axis=1).reshape(-1, 2)
    key = np.sort(pairs, axis=1)
    order = np.lexsort((key[:, 1], key[:, 0]))
    sk = key[order]
    same = np.all(sk[1:] == sk[:-1], axis=1)
    partner = np.full(len(pairs), -1, dtype=np.int64)
    i = np.nonzero(same)[0]
    partner[order[i]] = order[i + 1]
    partner[order[i + 1]] = order[i]
    return np.where(partner >= 0, partner // 3, -1).reshape(-1, 3)


def signed_distance(points: np.ndarray, mesh: TriMesh, k: int = 32):
    """Signed distance from each point to the mesh, positive outside.

    Candidate faces come from a centroid KD-tree (``k`` per query). The sign
    comes from the angle-weighted pseudonormal of the closest feature (face,
    edge, or vertex), which classifies inside/outside exactly on watertight
    meshes even when the nearest point sits on a crease — a bare nearest-face
    normal gets that wrong on a whole neighborhood of concave edges.
    Returns ``(d, grad, face)`` with ``grad`` the unit direction increasing
    ``d`` (the face normal when a point sits exactly on the surface).
    """
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        return np.zeros(0), np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    centroids = mesh.vertices[mesh.faces].mean(axis=1)
    k = min(k, len(centroids))
    tree = cKDTree(centroids)
    _, idx = tree.query(points, k=k)
    idx = idx.reshape(len(points), k)
    tri = mesh.vertices[mesh.faces[idx]]  # (n, k, 3, 3)
    cp, region = _closest_point_on_triangles(points[:, None, :], tri)
    d2 = np.sum((points[:, None, :] - cp) ** 2, axis=-1)
    j = np.argmin(d2, axis=1)
    rows = np.arange(len(points))
    best_face = idx[rows, j]
    best_cp = cp[rows, j]
    best_reg = region[rows, j]
    diff = points - best_cp
    dist = np.linalg.norm(diff, axis=1)

    fn = _face_unit_normals(mesh)
    nrm = fn[best_face]
    pseudo = nrm.copy()
    edge_sel = (best_reg >= REGION_AB) & (best_reg <= REGION_BC)
    if edge_sel.any():
        neighbors = _edge_neighbor_faces(mesh)
        g = neighbors[best_face[edge_sel], best_reg[edge_sel] - REGION_AB]
        other = np.where(g[:, None] >= 0, fn[np.maximum(g, 0)], 0.0)
        pseudo[edge_sel] = nrm[edge_sel] + other
    vert_sel = best_reg <= REGION_C
    if vert_sel.any():
        vn = _angle_weighted_vertex_normals(mesh)
        corners = mesh.faces[best_face[vert_sel], best_reg[vert_sel]]
        pseudo[vert_sel] = vn[corners]
    sign = np.where(np.sum(diff * pseudo, axis=1) >= 0.0, 1.0, -1.0)
    on_surface = dist <= 1e-12
    grad = np.where(on_surface[:, None], nrm,
                    sign[:, None] * diff / np.maximum(dist, 1e-300)[:, None])
    d = np.where(on_surface, 0.0, sign * dist)
    return d, grad, best_face


def collision_loss(points: np.ndarray, body: TriMesh, weights: LossWeights):
    """Cubic hinge pushing garment points outside the body clearance.

    ``k_collision * max(eps2 - d, 0)^3`` summed over points, with ``d`` the
    signed distance to the body surface.  Returns ``(value, d_points)``; the
    body is held fixed.
    """
    points = np.asarray(points, dtype=np.float64)
    d, grad, _ = signed_distance(points, body)
    gap = np.maximum(weights.eps2 - d, 0.0)
    value = float(weights.k_collision * np.sum(gap ** 3))
    d_points = (-3.0 * weights.k_collision * gap ** 2)[:, None] * grad
    return value, d_points


# ---------------------------------------------------------------------------
# assembly


def total_objective(stage: str, weights: LossWeights, *,
                    render=None, truth=None, pixels: PixelSets = None,
                    grid: TetGrid = None, sdf: np.ndarray = None,
                    surface_nu: np.ndarray = None,
                    cloth_points: np.ndarray = None, body_mesh: TriMesh = None,
                    deformed_mesh: TriMesh = None):
    """Stage-filtered weighted sum of the active terms.

    ``render`` supplies the per-layer buffers, ``truth`` the matching
    supervision arrays (rgb_body / rgb_cloth / mask_body / mask_cloth /
    normal).  Terms outside ``STAGE_TERMS[stage]`` contribute exactly zero
    regardless of their weight.  Returns ``(report, grads)`` where ``grads``
    holds weighted-total gradients per input block: rgb_body, rgb_cloth,
    label_body, label_cloth, normal, sdf, nu, cloth_points,
    deformed_vertices.
    """
    if stage not in STAGE_TERMS:
        raise ObjectiveError(f"unknown stage {stage!r}")
    active = STAGE_TERMS[stage]
    report = LossReport(stage=stage)
    grads: dict = {}

    def accum(block, g, w):
        if block in grads:
            grads[block] = grads[block] + w * g
        else:
            grads[block] = w * g

    def record(name, value, *blocks):
        w = weights.term_weight(name)
        report.terms[name] = value
        report.total += w * value
        for block, g in blocks:
            accum(block, g, w)
            key = f"{name}/{block}"
            report.grad_norms[key] = float(np.linalg.norm(np.asarray(g).ravel()))

    if "color" in active and render is not None and truth is not None:
        v, gb, gc = color_loss(render.rgb_body, render.rgb_cloth,
                               truth.rgb_body, truth.rgb_cloth, pixels)
        record("color", v, ("rgb_body", gb), ("rgb_cloth", gc))
    if "mask" in active and render is not None and truth is not None:
        v, gb, gc = mask_loss(render.label_body, render.label_cloth,
                              truth.mask_body, truth.mask_cloth, pixels)
        record("mask", v, ("label_body", gb), ("label_cloth", gc))
    if "normal" in active and render is not None and truth is not None:
        v, g = normal_loss(render.normal, truth.normal)
        record("normal", v, ("normal", g))
    if "eikonal" in active and grid is not None and sdf is not None:
        v, g = eikonal_loss(grid, sdf)
        record("eikonal", v, ("sdf", g))
    if "hole_open" in active and surface_nu is not None:
        v, g = hole_open_loss(surface_nu, weights)
        record("hole_open", v, ("nu", g))
    if "hole_reg" in active and surface_nu is not None:
        v, g = hole_reg_loss(surface_nu, weights)
        record("hole_reg", v, ("nu", g))
    if "collision" in active and cloth_points is not None and body_mesh is not None:
        v, g = collision_loss(cloth_points, body_mesh, weights)
        record("collision", v, ("cloth_points", g))
    if "n_consist" in active and deformed_mesh is not None:
        v, g = normal_consistency_energy(deformed_mesh)
        record("n_consist", v, ("deformed_vertices", g))
    if "laplacian" in active and deformed_mesh is not None:
        v, g = laplacian_energy(deformed_mesh)
        record("laplacian", v, ("deformed_vertices", g))

    check = sum(weights.term_weight(k) * v for k, v in report.terms.items())
    assert abs(check - report.total) <= 1e-9 * max(1.0, abs(check))
    return report, grads
