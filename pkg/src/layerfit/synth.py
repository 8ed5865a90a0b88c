"""Synthetic capture rig: scenes, ground-truth supervision, and metrics.

A scene is the capsule-limb humanoid wearing a procedural garment band
around the waist, observed by an orbiting camera over a short pose sequence
with per-frame wrinkle phases.  Supervision images come from an independent
per-face z-buffer painter that shares the projection and barycentric
formulas with the differentiable rasterizer but none of its visibility
logic, so the two paths cross-validate each other pixel for pixel.
"""

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import Camera, look_at
from .losses import signed_distance
from .mesh import BODY, CLOTH, TriMesh
from .render import RenderBuffers, SoftRasterConfig, _face_normals_tolerant, _merge_scene
from .skeleton import Pose, Skeleton, build_humanoid, identity_pose, quat_about_axis
from .skinning import BodyTemplate, build_template, compute_skin_weights, lbs_apply


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to regenerate a scene deterministically."""

    n_frames: int = 12
    image_size: int = 128
    seed: int = 0
    # camera orbit
    orbit_radius: float = 2.0
    orbit_elevation_deg: float = 10.0
    fov_deg: float = 50.0
    # body
    radii_scale: float = 1.0
    arm_swing_deg: float = 5.0
    body_resolution: int = 44
    # garment band (radial offset measured from the torso axis)
    band_center: float = 0.08
    band_width: float = 0.20
    band_offset: float = 0.20
    band_segments: int = 64
    band_rings: int = 16
    wrinkle_amplitude: float = 0.012
    wrinkle_freq: int = 8
    # appearance
    albedo_body: tuple = (0.80, 0.62, 0.50)
    albedo_cloth: tuple = (0.25, 0.35, 0.75)
    ambient: float = 0.55
    clearance: float = 0.005  # minimum garment-to-body distance enforced

    def __post_init__(self):
        if self.n_frames < 1:
            raise SynthError("need at least one frame")
        if self.band_offset < self.clearance:
            raise SynthError("band offset smaller than required clearance")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_mapping(cls, doc: dict) -> "SceneSpec":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(doc) - known
        if extra:
            raise SynthError(f"unknown scene fields: {sorted(extra)}")
        doc = dict(doc)
        for tup in ("albedo_body", "albedo_cloth"):
            if tup in doc:
                doc[tup] = tuple(doc[tup])
        return cls(**doc)


def load_scene_spec(path) -> SceneSpec:
    path = Path(path)
    text = path.read_bytes()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # pre-3.11
            import tomli as tomllib
        doc = tomllib.loads(text.decode())
    else:
        doc = json.loads(text)
    return SceneSpec.from_mapping(doc)


def save_scene_spec(path, spec: SceneSpec) -> None:
    Path(path).write_text(json.dumps(spec.to_json(), indent=1))


@dataclass
class Scene:
    spec: SceneSpec
    template: BodyTemplate
    poses: list
    cameras: list
    body_frames: list
    cloth_frames: list
    canonical_body: TriMesh
    canonical_cloth: TriMesh
    clearances: np.ndarray  # min garment-body distance per frame


@dataclass
class SupervisionFrame:
    """One observed frame: image, occlusion-aware masks, normals, calibration."""

    rgb: np.ndarray
    mask_body: np.ndarray
    mask_cloth: np.ndarray
    normal: np.ndarray
    camera: Camera
    pose: Pose
    frame: int

    @property
    def rgb_body(self) -> np.ndarray:
        return self.rgb * self.mask_body[..., None]

    @property
    def rgb_cloth(self) -> np.ndarray:
        return self.rgb * self.mask_cloth[..., None]


# ---------------------------------------------------------------------------
# scene construction


def _band_mesh(spec: SceneSpec, amp: float, phase: float) -> TriMesh:
    """Open garment tube around the vertical torso axis, outward-facing."""
    nt, ny = spec.band_segments, spec.band_rings
    theta = 2.0 * np.pi * np.arange(nt) / nt
    y0 = spec.band_center - 0.5 * spec.band_width
    y1 = spec.band_center + 0.5 * spec.band_width
    ys = np.linspace(y0, y1, ny)
    window = np.sin(np.pi * (ys - y0) / (y1 - y0))  # zero at both rims
    r = spec.band_offset + amp * window[:, None] * np.sin(
        spec.wrinkle_freq * theta[None, :] + phase)
    verts = np.empty((ny, nt, 3))
    verts[..., 0] = r * np.cos(theta)[None, :]
    verts[..., 1] = ys[:, None]
    verts[..., 2] = r * np.sin(theta)[None, :]
    verts = verts.reshape(-1, 3)
    idx = np.arange(ny * nt).reshape(ny, nt)
    nxt = np.roll(idx, -1, axis=1)
    f1 = np.stack([idx[:-1], idx[1:], nxt[:-1]], axis=-1).reshape(-1, 3)
    f2 = np.stack([nxt[:-1], idx[1:], nxt[1:]], axis=-1).reshape(-1, 3)
    faces = np.concatenate([f1, f2])
    return TriMesh(verts, faces, face_labels=np.full(len(faces), CLOTH, dtype=np.int8))


def _vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted unit vertex normals."""
    cross = mesh.face_cross
    out = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(out, mesh.faces[:, k], cross)
    n = np.linalg.norm(out, axis=1)
    return out / np.maximum(n, 1e-15)[:, None]


_LIGHT = np.array([0.35, 0.85, 0.45])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)


def _shade(mesh: TriMesh, albedo, ambient: float) -> np.ndarray:
    lam = np.maximum(_vertex_normals(mesh) @ _LIGHT, 0.0)
    shade = ambient + (1.0 - ambient) * lam
    return np.clip(shade[:, None] * np.asarray(albedo, float)[None, :], 0.0, 1.0)


def scene_poses(spec: SceneSpec, skeleton: Skeleton) -> list:
    """Gentle shoulder swing, one sample per frame."""
    poses = []
    n = len(skeleton.names)
    li = skeleton.names.index("l_shoulder")
    ri = skeleton.names.index("r_shoulder")
    swing = np.deg2rad(spec.arm_swing_deg)
    for t in range(spec.n_frames):
        ang = swing * np.sin(2.0 * np.pi * t / spec.n_frames)
        quats = np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1))
        quats[li] = quat_about_axis([0.0, 0.0, 1.0], ang)
        quats[ri] = quat_about_axis([0.0, 0.0, 1.0], -ang)
        poses.append(Pose(quats, np.zeros(3)))
    return poses


def scene_cameras(spec: SceneSpec) -> list:
    target = np.array([0.0, 0.1, 0.0])
    elev = np.deg2rad(spec.orbit_elevation_deg)
    cams = []
    for t in range(spec.n_frames):
        ang = 2.0 * np.pi * t / spec.n_frames
        eye = target + spec.orbit_radius * np.array(
            [np.sin(ang) * np.cos(elev), np.sin(elev), np.cos(ang) * np.cos(elev)])
        cams.append(look_at(eye, target, fov_deg=spec.fov_deg,
                            width=spec.image_size, height=spec.image_size))
    return cams


def build_scene(spec: SceneSpec) -> Scene:
    """Deterministic GT meshes per frame; raises if the garment touches the body."""
    rng = np.random.default_rng(spec.seed)
    skeleton = build_humanoid()
    if spec.radii_scale != 1.0:
        skeleton = Skeleton(skeleton.names, skeleton.parents, skeleton.offsets,
                            skeleton.bone_radii * spec.radii_scale,
                            torso_center=skeleton.torso_center,
                            torso_axes=skeleton.torso_axes * spec.radii_scale)
    template = build_template(skeleton, resolution=spec.body_resolution)
    body_weights = compute_skin_weights(template.surface.vertices, template)
    base_band = _band_mesh(spec, amp=0.0, phase=0.0)
    band_weights = compute_skin_weights(base_band.vertices, template)
    poses = scene_poses(spec, skeleton)
    cameras = scene_cameras(spec)
    phases = rng.uniform(0.0, 2.0 * np.pi, spec.n_frames)

    body_frames, cloth_frames, clearances = [], [], []
    canonical_body = TriMesh(template.surface.vertices, template.surface.faces,
                             face_labels=np.full(template.surface.n_faces, BODY,
                                                 dtype=np.int8))
    canonical_cloth = base_band
    for t in range(spec.n_frames):
        band = _band_mesh(spec, spec.wrinkle_amplitude, phases[t])
        cloth_v = lbs_apply(band.vertices, band_weights, poses[t], template)
        body_v = lbs_apply(canonical_body.vertices, body_weights, poses[t], template)
        body_t = TriMesh(body_v, canonical_body.faces, canonical_body.face_labels)
        cloth_t = TriMesh(cloth_v, band.faces, band.face_labels)
        d, _, _ = signed_distance(cloth_t.vertices, body_t)
        clearances.append(float(d.min()))
        if d.min() < spec.clearance:
            raise SynthError(
                f"frame {t}: garment-body clearance {d.min():.4f} below "
                f"{spec.clearance}; adjust band placement or amplitude")
        body_t = TriMesh(body_v, body_t.faces, body_t.face_labels,
                         vertex_colors=_shade(body_t, spec.albedo_body, spec.ambient))
        cloth_t = TriMesh(cloth_v, cloth_t.faces, cloth_t.face_labels,
                          vertex_colors=_shade(cloth_t, spec.albedo_cloth, spec.ambient))
        body_frames.append(body_t)
        cloth_frames.append(cloth_t)
    return Scene(spec, template, poses, cameras, body_frames, cloth_frames,
                 canonical_body, canonical_cloth, np.array(clearances))


# ---------------------------------------------------------------------------
# independent z-buffer renderer (the supervision oracle)


def zbuffer_render(meshes: list, camera: Camera, near: float = 0.05,
                   with_normals: bool = True) -> RenderBuffers:
    """Per-face painter's z-buffer over pixel centers.

    Visibility is decided one face at a time with a strict depth test
    (earlier face wins ties), fully independently of the fragment-sort path
    in :mod:`.render`; per-pixel attribute arithmetic follows the exact same
    formulas so agreement is bitwise.
    """
    h, w = camera.height, camera.width
    verts, faces, labels, colors, _ = _merge_scene(meshes)
    buffers = RenderBuffers(np.zeros((h, w, 3)), np.zeros((h, w, 3)),
                            np.zeros((h, w)), np.zeros((h, w)),
                            np.zeros((h, w)), np.zeros((h, w)),
                            np.zeros((h, w, 3)) if with_normals else None, 0)
    if len(faces) == 0:
        return buffers
    uv, z = camera.project(verts)
    zbuf = np.full((h, w), np.inf)
    win_face = np.full((h, w), -1, dtype=np.int64)
    win_col = np.zeros((h, w, 3))
    ncam = None
    if with_normals:
        n_world, _, _ = _face_normals_tolerant(verts, faces)
        ncam = n_world @ camera.rotation.T

    pad = 1.0
    culled = 0
    for fi in range(len(faces)):
        ia, ib, ic = faces[fi]
        za, zb, zc = z[ia], z[ib], z[ic]
        if not (za > near and zb > near and zc > near):
            culled += 1
            continue
        ax, ay = uv[ia, 0], uv[ia, 1]
        bx, by = uv[ib, 0], uv[ib, 1]
        cx, cy = uv[ic, 0], uv[ic, 1]
        dd = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if not abs(dd) > 1e-12:
            culled += 1
            continue
        x0 = int(np.clip(np.floor(min(ax, bx, cx) - pad), 0, w - 1))
        x1 = int(np.clip(np.ceil(max(ax, bx, cx) + pad), 0, w - 1))
        y0 = int(np.clip(np.floor(min(ay, by, cy) - pad), 0, h - 1))
        y1 = int(np.clip(np.ceil(max(ay, by, cy) + pad), 0, h - 1))
        if x1 < x0 or y1 < y0:
            continue
        qx = np.arange(x0, x1 + 1) + 0.5
        qy = (np.arange(y0, y1 + 1) + 0.5)[:, None]
        l0 = ((bx - qx) * (cy - qy) - (by - qy) * (cx - qx)) / dd
        l1 = ((cx - qx) * (ay - qy) - (cy - qy) * (ax - qx)) / dd
        l2 = ((ax - qx) * (by - qy) - (ay - qy) * (bx - qx)) / dd
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        if not inside.any():
            continue
        u0 = np.maximum(l0, 0.0)
        u1 = np.maximum(l1, 0.0)
        u2 = np.maximum(l2, 0.0)
        usum = u0 + u1 + u2
        m0, m1, m2 = u0 / usum, u1 / usum, u2 / usum
        inv_z = m0 / za + m1 / zb + m2 / zc
        zf = 1.0 / inv_z
        tile = zbuf[y0:y1 + 1, x0:x1 + 1]
        better = inside & (zf < tile)
        if not better.any():
            continue
        tile[better] = zf[better]
        win_face[y0:y1 + 1, x0:x1 + 1][better] = fi
        col = (m0[..., None] * colors[ia] + m1[..., None] * colors[ib]
               + m2[..., None] * colors[ic])
        win_col[y0:y1 + 1, x0:x1 + 1][better] = col[better]

    buffers.culled_faces = culled
    hit = win_face >= 0
    buffers.alpha[hit] = 1.0
    buffers.depth[hit] = zbuf[hit]
    wl = labels[win_face[hit]]
    hy, hx = np.nonzero(hit)
    buffers.label_body[hy[wl == BODY], hx[wl == BODY]] = 1.0
    buffers.label_cloth[hy[wl == CLOTH], hx[wl == CLOTH]] = 1.0
    buffers.rgb_body[hy[wl == BODY], hx[wl == BODY]] = win_col[hit][wl == BODY]
    buffers.rgb_cloth[hy[wl == CLOTH], hx[wl == CLOTH]] = win_col[hit][wl == CLOTH]
    if with_normals:
        buffers.normal[hit] = ncam[win_face[hit]]
    return buffers


def render_supervision(scene: Scene, t: int) -> SupervisionFrame:
    """Ground-truth frame via the z-buffer oracle with occlusion-aware masks."""
    if not 0 <= t < scene.spec.n_frames:
        raise SynthError(f"frame {t} outside 0..{scene.spec.n_frames - 1}")
    cam = scene.cameras[t]
    buf = zbuffer_render([scene.body_frames[t], scene.cloth_frames[t]], cam)
    rgb = buf.rgb_body + buf.rgb_cloth
    return SupervisionFrame(rgb=rgb,
                            mask_body=buf.label_body > 0.5,
                            mask_cloth=buf.label_cloth > 0.5,
                            normal=buf.normal,
                            camera=cam, pose=scene.poses[t], frame=t)


# ---------------------------------------------------------------------------
# supervision IO


def save_supervision(directory, frame: SupervisionFrame) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    t = frame.frame
    img = np.clip(np.round(frame.rgb * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(directory / f"frame_{t:04d}_rgb.png")
    Image.fromarray(frame.mask_body.astype(np.uint8) * 255).save(
        directory / f"frame_{t:04d}_mask_body.png")
    Image.fromarray(frame.mask_cloth.astype(np.uint8) * 255).save(
        directory / f"frame_{t:04d}_mask_cloth.png")
    np.save(directory / f"frame_{t:04d}_normal.npy", frame.normal.astype(np.float32))
    frame.camera.to_json(directory / f"frame_{t:04d}_camera.json")
    doc = {"frame": t, "quaternions": frame.pose.quats.tolist(),
           "root_translation": frame.pose.root_translation.tolist()}
    (directory / f"frame_{t:04d}_pose.json").write_text(json.dumps(doc, indent=1))


def load_supervision(directory, t: int) -> SupervisionFrame:
    directory = Path(directory)
    base = directory / f"frame_{t:04d}"
    try:
        rgb = np.asarray(Image.open(f"{base}_rgb.png"), dtype=np.float64) / 255.0
        mask_body = np.asarray(Image.open(f"{base}_mask_body.png")) > 127
        mask_cloth = np.asarray(Image.open(f"{base}_mask_cloth.png")) > 127
        normal = np.load(f"{base}_normal.npy").astype(np.float64)
        cam = Camera.from_json(f"{base}_camera.json")
        doc = json.loads(Path(f"{base}_pose.json").read_text())
    except FileNotFoundError as exc:
        raise SynthError(f"missing supervision file for frame {t}: {exc}") from exc
    pose = Pose(np.array(doc["quaternions"]), np.array(doc["root_translation"]))
    return SupervisionFrame(rgb, mask_body, mask_cloth, normal, cam, pose, t)


# ---------------------------------------------------------------------------
# metrics


def _mesh_rng(mesh: TriMesh, seed: int) -> np.random.Generator:
    """Generator keyed by mesh content so sampling ignores argument order."""
    h = hashlib.blake2b(digest_size=8)
    h.update(np.ascontiguousarray(mesh.vertices).tobytes())
    h.update(np.ascontiguousarray(mesh.faces).tobytes())
    h.update(seed.to_bytes(8, "little", signed=True))
    return np.random.default_rng(int.from_bytes(h.digest(), "little"))


def sample_surface(mesh: TriMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-uniform surface samples, (n, 3)."""
    areas = mesh.face_areas
    total = areas.sum()
    if mesh.n_faces == 0 or total <= 0:
        raise SynthError("cannot sample an empty mesh")
    fids = rng.choice(mesh.n_faces, size=n, p=areas / total)
    s = np.sqrt(rng.random(n))
    v = rng.random(n) * s
    u = 1.0 - s
    tri = mesh.vertices[mesh.faces[fids]]
    return (u[:, None] * tri[:, 0] + (s - v)[:, None] * tri[:, 1]
            + v[:, None] * tri[:, 2])


def chamfer(a: TriMesh, b: TriMesh, samples: int = 100_000, seed: int = 0) -> float:
    """Symmetric mean squared nearest-surface distance (m^2).

    Each mesh is sampled with a generator keyed by its own content, so
    ``chamfer(a, b) == chamfer(b, a)`` exactly.
    """
    if a.n_faces == 0 or b.n_faces == 0:
        raise SynthError("chamfer needs two non-empty meshes")
    if np.array_equal(a.vertices, b.vertices) and np.array_equal(a.faces, b.faces):
        return 0.0  # identical surfaces: exact, and cheaper than estimating it
    pa = sample_surface(a, samples, _mesh_rng(a, seed))
    pb = sample_surface(b, samples, _mesh_rng(b, seed))
    da, _, _ = signed_distance(pa, b)
    db, _, _ = signed_distance(pb, a)
    return 0.5 * (float(np.mean(da * da)) + float(np.mean(db * db)))


def label_iou(predicted: TriMesh, gt_cloth: TriMesh, threshold: float,
              samples: int = 20_000, seed: int = 0) -> float:
    """Area-weighted IoU of the predicted cloth region against GT garment.

    Both regions are sampled uniformly by area; a sample counts as shared
    when it projects within ``threshold`` of the other surface.  The
    intersection estimate averages both directions.
    """
    if predicted.face_labels is None:
        raise SynthError("predicted mesh carries no layer labels")
    cloth = predicted.submesh(predicted.face_labels == CLOTH)
    if cloth.n_faces == 0:
        return 0.0
    if gt_cloth.n_faces == 0:
        raise SynthError("GT garment mesh is empty")
    area_a = float(cloth.area)
    area_b = float(gt_cloth.area)
    pa = sample_surface(cloth, samples, _mesh_rng(cloth, seed))
    pb = sample_surface(gt_cloth, samples, _mesh_rng(gt_cloth, seed))
    da, _, _ = signed_distance(pa, gt_cloth)
    db, _, _ = signed_distance(pb, cloth)
    inter = 0.5 * (area_a * float(np.mean(np.abs(da) <= threshold))
                   + area_b * float(np.mean(np.abs(db) <= threshold)))
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return float(np.clip(inter / union, 0.0, 1.0))
