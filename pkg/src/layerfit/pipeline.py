"""Two-stage fitting orchestration.

Stage 1 (template): optimize the grid distance field, the on-surface layer
field, and a per-grid-vertex albedo field against multi-view mask + color
supervision, deforming each extracted surface to the observed frames with
skinning alone.  Stage 2 (sequence): freeze the fields and optimize two
non-rigid displacement networks plus per-frame latent codes under the
detail objective (normals, collision, geometry regularizers).

Every stochastic choice is a pure function of (seed, iteration), so a run
interrupted at a checkpoint and resumed reproduces the uninterrupted run
bit for bit.  Checkpoints live in a directory holding ``fields.bin``,
``colors.bin``, ``models.bin``, ``latents.bin``, ``optim.bin``, and
``meta.json`` (step, config hash, seed); per-frame meshes are written as
``frame_{t}_cloth.ply`` / ``frame_{t}_body.ply``.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .extraction import SurfaceExtraction, extract_surface, split_surface
from .deform import DeformModels, cloth_vertex_mask, deform_backward, deform_to_observed
from .losses import (LossReport, STAGE_DETAIL, STAGE_TEMPLATE, build_pixel_sets,
                     normal_loss, signed_distance, total_objective)
from .mesh import BODY, CLOTH, TriMesh, boundary_loops, collapse_slivers
from .mesh_io import write_mesh
from .nonrigid import (NonRigidField, load_latents, load_models, save_latents,
                       save_models)
from .optim import OptimState, adam_step, load_optim, save_optim
from .regions import AggregationReport, aggregate
from .render import SoftRasterConfig, rasterize, rasterize_backward
from .skeleton import template_sdf
from .skinning import BodyTemplate, build_template, compute_skin_weights, lbs_apply, lbs_backward
from .tetgrid import (FieldState, TetGrid, load_colors, load_fields, make_grid,
                      save_colors, save_fields)


class PipelineError(RuntimeError):
    """Unrecoverable state during a fitting run."""


# ---------------------------------------------------------------------------
# results


@dataclass
class CompletionResult:
    """Merged body surface plus how the merge went.

    ``stitch_fallback`` is set when boundary-loop matching failed and the
    output is the plain union of the two parts (not watertight).
    """

    mesh: TriMesh
    stitch_fallback: bool
    template_faces_kept: int
    loops_stitched: int


@dataclass
class TemplateResult:
    """Canonical clothed surface with layer labels plus the derived templates."""

    canonical: TriMesh
    garment: TriMesh
    body_full: TriMesh
    stitch_fallback: bool
    aggregation: AggregationReport
    final_report: LossReport
    fields: FieldState
    grid_colors: np.ndarray
    grid: TetGrid
    template: BodyTemplate
    iterations_run: int = 0
    converged: bool = False
    rollbacks: int = 0


@dataclass
class SequenceResult:
    """Per-frame observed-space meshes and the detail-stage diagnostics."""

    cloth_meshes: list
    body_meshes: list
    reports: list
    baseline_normal: list
    final_normal: list
    interpenetration: list
    iterations_run: int = 0
    converged: bool = False


# ---------------------------------------------------------------------------
# initialization and determinism helpers


def init_fields(grid: TetGrid, template: BodyTemplate, config: RunConfig):
    """Starting point for stage 1: inflated body distances, height-band layer.

    The distance field is the analytic capsule/ellipsoid distance minus the
    inflation, so the initial surface wraps the body loosely; the layer field
    is the signed height-interval distance (positive inside ``hm_band``),
    which marks the garment region before any image evidence arrives.
    """
    sdf = template_sdf(template.skeleton, grid.vertices) - config.sdf_inflate
    lo, hi = config.hm_band
    y = grid.vertices[:, 1]
    hm = np.minimum(y - lo, hi - y)
    colors = np.full((grid.n_vertices, 3), 0.5)
    return FieldState(sdf, hm), colors


def _select_frames(seed: int, iteration: int, n_frames: int, batch: int) -> np.ndarray:
    """Frame batch for one iteration, a pure function of (seed, iteration)."""
    k = min(batch, n_frames)
    rng = np.random.default_rng([seed, 0x5F17, iteration])
    return np.sort(rng.choice(n_frames, size=k, replace=False))


def _parallel_map(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _window_converged(totals: list, window: int, tol: float) -> bool:
    if len(totals) < 2 * window:
        return False
    cur = float(np.mean(totals[-window:]))
    prev = float(np.mean(totals[-2 * window:-window]))
    return abs(cur - prev) <= tol * max(abs(prev), 1e-12)


class _LossLog:
    """Append-only JSON-lines log; reloading it keeps convergence checks
    identical across an interrupt/resume boundary."""

    def __init__(self, path: Path | None):
        self.path = path
        self.totals: list = []
        if path is None:
            return
        if path.is_file():
            with open(path) as fh:
                for raw in fh:
                    raw = raw.strip()
                    if not raw:
                        continue
                    line = json.loads(raw)
                    if "total" in line:
                        self.totals.append(float(line["total"]))
        else:
            path.touch()  # a zero-iteration run still owns its (empty) log

    def write(self, line: dict) -> None:
        if "total" in line:
            self.totals.append(float(line["total"]))
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(line, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, *, fields: FieldState, colors: np.ndarray,
                    optim: OptimState, meta: dict, models: dict | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_fields(path / "fields.bin", fields)
    save_colors(path / "colors.bin", colors)
    save_optim(path / "optim.bin", optim)
    if models is not None:
        save_models(path / "models.bin", models)
        save_latents(path / "latents.bin", {k: f.latents for k, f in models.items()})
    with open(path / "meta.json", "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_checkpoint(path: str | Path) -> dict:
    """Read whatever a checkpoint directory holds; keys mirror the file names."""
    path = Path(path)
    if not (path / "meta.json").is_file():
        raise PipelineError(f"no checkpoint at {path} (meta.json missing)")
    with open(path / "meta.json") as fh:
        meta = json.load(fh)
    out = {"meta": meta, "path": path}
    out["fields"] = load_fields(path / "fields.bin")
    out["colors"] = load_colors(path / "colors.bin")
    if (path / "models.bin").is_file():
        models = load_models(path / "models.bin")
        latents = load_latents(path / "latents.bin")
        for name, f in models.items():
            f.latents = latents[name]
        out["models"] = models
    return out


def _snapshot(state: OptimState) -> dict:
    return {
        "params": {k: v.copy() for k, v in state.params.items()},
        "m": {k: v.copy() for k, v in state.m.items()},
        "v": {k: v.copy() for k, v in state.v.items()},
        "step": state.step,
    }


def _restore(state: OptimState, snap: dict) -> None:
    for k, p in state.params.items():
        np.copyto(p, snap["params"][k])
        np.copyto(state.m[k], snap["m"][k])
        np.copyto(state.v[k], snap["v"][k])
    state.step = snap["step"]


# ---------------------------------------------------------------------------
# stage 1: template fitting


def _merge_reports(stage: str, frame_reports: list, field_report: LossReport | None) -> LossReport:
    """Mean of the per-frame image terms plus the once-per-iteration field terms."""
    merged = LossReport(stage=stage)
    n = max(len(frame_reports), 1)
    for rep in frame_reports:
        for k, v in rep.terms.items():
            merged.terms[k] = merged.terms.get(k, 0.0) + v / n
        merged.total += rep.total / n
    if field_report is not None:
        merged.terms.update(field_report.terms)
        merged.total += field_report.total
    return merged


def fit_template(frames: list, config: RunConfig, out_dir: str | Path | None = None,
                 resume_from: str | Path | None = None,
                 iterations: int | None = None) -> TemplateResult:
    """Optimize fields until the clothed template explains every view.

    ``iterations`` caps the loop (0 returns the initialization unchanged);
    otherwise the run stops at ``config.template_iterations`` or when the
    windowed total-loss change drops below ``config.convergence_tol``.
    """
    if not frames:
        raise PipelineError("fit_template needs at least one supervision frame")
    cap = config.template_iterations if iterations is None else int(iterations)
    if cap < 0:
        raise PipelineError(f"negative iteration count {cap}")
    template = build_template()
    grid = make_grid(config.resolution, config.bounds)
    lr_fields = config.lr_fields
    rollbacks = 0
    start = 0
    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        meta = ck["meta"]
        if meta.get("stage") != "template":
            raise PipelineError(f"checkpoint at {resume_from} is not a template stage")
        if meta.get("config_hash") != config.config_hash():
            raise PipelineError("checkpoint config hash does not match this run")
        fields, colors = ck["fields"], ck["colors"]
        if len(fields.sdf) != grid.n_vertices:
            raise PipelineError("checkpoint field size does not match the grid")
        start = int(meta["step"])
        lr_fields = float(meta.get("lr_fields", lr_fields))
        rollbacks = int(meta.get("rollbacks", 0))
    else:
        fields, colors = init_fields(grid, template, config)

    state = OptimState(
        params={"sdf": fields.sdf, "hm": fields.hm, "colors": colors},
        lrs={"sdf": lr_fields, "hm": lr_fields, "colors": lr_fields},
    )
    if resume_from is not None:
        load_optim(Path(resume_from) / "optim.bin", state)

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    log = _LossLog(out_path / "template_loss.jsonl" if out_path else None)
    rcfg = SoftRasterConfig(sigma=config.sigma, gamma=config.gamma,
                            band=config.band, cull_back=True)
    pixel_sets = [build_pixel_sets(fr.mask_body, fr.mask_cloth) for fr in frames]

    def meta_dict(step: int) -> dict:
        return {"stage": "template", "step": step, "config_hash": config.config_hash(),
                "seed": config.seed, "lr_fields": state.lrs["sdf"],
                "rollbacks": rollbacks}

    def checkpoint(step: int) -> None:
        if out_path is not None:
            save_checkpoint(out_path / "checkpoint", fields=fields, colors=colors,
                            optim=state, meta=meta_dict(step))

    snap = _snapshot(state)
    converged = False
    it = start
    while it < cap:
        ext = extract_surface(grid, fields, colors)
        if ext.mesh.n_faces == 0:
            # surface vanished: restore the last checkpointed state and slow down
            rollbacks += 1
            _restore(state, snap)
            for k in state.lrs:
                state.lrs[k] *= 0.5
            log.write({"iteration": it, "event": "rollback",
                       "lr_fields": state.lrs["sdf"]})
            if state.lrs["sdf"] < 1e-8:
                raise PipelineError("surface vanished and the learning rate floor "
                                    "was reached; aborting template fit")
            it += 1
            continue
        split = split_surface(ext.mesh, ext.hm)
        labels = split.mesh.face_labels
        if it % config.aggregation_interval == 0:
            cleaned, _ = aggregate(split.mesh, config.alpha_body, config.alpha_cloth,
                                   weld_tol=0.0)
            labels = cleaned.face_labels
        sweights = compute_skin_weights(split.mesh.vertices, template)
        batch = _select_frames(config.seed, it, len(frames), config.views_per_iter)
        scale = 1.0 / len(batch)

        def frame_job(t: int):
            fr = frames[t]
            posed, blend = lbs_apply(split.mesh.vertices, sweights, fr.pose,
                                     template, return_blend=True)
            pm = TriMesh(posed, split.mesh.faces, labels,
                         split.mesh.vertex_colors, validate=False)
            buf = rasterize([pm], fr.camera, rcfg)
            rep, g = total_objective(STAGE_TEMPLATE, config.weights, render=buf,
                                     truth=fr, pixels=pixel_sets[t])
            rg = rasterize_backward(buf,
                                    d_rgb_body=g.get("rgb_body"),
                                    d_rgb_cloth=g.get("rgb_cloth"),
                                    d_label_body=g.get("label_body"),
                                    d_label_cloth=g.get("label_cloth"))
            return rep, lbs_backward(blend, rg.d_vertices[0]), rg.d_colors[0]

        results = _parallel_map(frame_job, list(batch), config.threads)
        d_split_v = np.zeros_like(split.mesh.vertices)
        d_split_c = np.zeros_like(split.mesh.vertex_colors)
        for _, dv, dc in results:
            d_split_v += scale * dv
            d_split_c += scale * dc
        field_rep, fg = total_objective(STAGE_TEMPLATE, config.weights, grid=grid,
                                        sdf=fields.sdf, surface_nu=ext.hm)
        d_orig, d_hm_split, d_orig_col = split.backward(
            d_positions=d_split_v, d_colors=d_split_c,
            orig_positions=ext.mesh.vertices, orig_colors=ext.colors)
        d_nu = d_hm_split + fg.get("nu", 0.0)
        d_sdf_g, d_hm_g, d_col_g = ext.backward(
            d_positions=d_orig, d_hm=d_nu, d_colors=d_orig_col, grid_colors=colors)
        grads = {"sdf": d_sdf_g + fg.get("sdf", 0.0), "hm": d_hm_g, "colors": d_col_g}
        adam_step(state, grads)

        merged = _merge_reports(STAGE_TEMPLATE, [r for r, _, _ in results], field_rep)
        line = {"iteration": it, "frames": [int(t) for t in batch]}
        line.update(merged.line())
        log.write(line)
        it += 1
        if it % config.checkpoint_interval == 0 or it == cap:
            checkpoint(it)
            snap = _snapshot(state)
        if _window_converged(log.totals, config.convergence_window,
                             config.convergence_tol):
            converged = True
            checkpoint(it)
            break

    if out_path is not None:
        checkpoint(it)
    result = _build_template_result(frames, config, grid, fields, colors, template,
                                    rcfg, pixel_sets)
    result.iterations_run = it
    result.converged = converged
    result.rollbacks = rollbacks
    if out_path is not None:
        write_mesh(out_path / "template_canonical.ply", result.canonical)
        write_mesh(out_path / "template_garment.ply", result.garment)
        write_mesh(out_path / "template_body.ply", result.body_full)
    return result


def _build_template_result(frames, config, grid, fields, colors, template,
                           rcfg, pixel_sets) -> TemplateResult:
    ext = extract_surface(grid, fields, colors)
    if ext.mesh.n_faces == 0:
        raise PipelineError("template fit ended with an empty surface")
    split = split_surface(ext.mesh, ext.hm)
    canonical, agg_report = aggregate(split.mesh, config.alpha_body, config.alpha_cloth)
    canonical, _ = collapse_slivers(canonical)
    garment = canonical.submesh(canonical.face_labels == CLOTH)
    visible_body = canonical.submesh(canonical.face_labels == BODY)
    completion = complete_body(visible_body, template, config.tau_merge)
    final = _evaluate_stage1(frames, config, grid, fields, ext, canonical,
                             template, rcfg, pixel_sets)
    return TemplateResult(canonical=canonical, garment=garment,
                          body_full=completion.mesh,
                          stitch_fallback=completion.stitch_fallback,
                          aggregation=agg_report, final_report=final,
                          fields=fields, grid_colors=colors, grid=grid,
                          template=template)


def _evaluate_stage1(frames, config, grid, fields, ext: SurfaceExtraction,
                     canonical: TriMesh, template, rcfg, pixel_sets) -> LossReport:
    """Forward-only stage-1 objective of the aggregated surface, all frames."""
    sweights = compute_skin_weights(canonical.vertices, template)

    def job(t: int):
        fr = frames[t]
        posed = lbs_apply(canonical.vertices, sweights, fr.pose, template)
        pm = TriMesh(posed, canonical.faces, canonical.face_labels,
                     canonical.vertex_colors, validate=False)
        buf = rasterize([pm], fr.camera, rcfg)
        rep, _ = total_objective(STAGE_TEMPLATE, config.weights, render=buf,
                                 truth=fr, pixels=pixel_sets[t])
        return rep

    reps = _parallel_map(job, list(range(len(frames))), config.threads)
    field_rep, _ = total_objective(STAGE_TEMPLATE, config.weights, grid=grid,
                                   sdf=fields.sdf, surface_nu=ext.hm)
    return _merge_reports(STAGE_TEMPLATE, reps, field_rep)


# ---------------------------------------------------------------------------
# body completion


def _order_loop(loop: np.ndarray, verts: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    """Rotate a cyclic loop to start at the vertex nearest ``anchor``."""
    d = np.linalg.norm(verts[loop] - anchor, axis=1)
    k = int(np.argmin(d))
    return np.concatenate([loop[k:], loop[:k]])


def _stitch_loops(loop_a: np.ndarray, loop_b: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Close the gap between two boundary loops with a triangle band.

    Greedy two-pointer zip: advance along whichever loop yields the shorter
    new diagonal. Every loop edge gains exactly one band face and every
    diagonal is shared by two, so the union becomes edge-watertight.
    """
    a = _order_loop(loop_a, verts, verts[loop_b].mean(axis=0))
    b = _order_loop(loop_b, verts, verts[a[0]])
    # run the loops in the same rotational direction along the gap
    if len(a) > 1 and len(b) > 1:
        if np.dot(verts[a[1]] - verts[a[0]], verts[b[1]] - verts[b[0]]) < 0:
            b = np.concatenate([b[:1], b[1:][::-1]])
    na, nb = len(a), len(b)
    tris = []
    i = j = 0
    while i < na or j < nb:
        adv_a = np.linalg.norm(verts[a[(i + 1) % na]] - verts[b[j % nb]]) \
            if i < na else np.inf
        adv_b = np.linalg.norm(verts[a[i % na]] - verts[b[(j + 1) % nb]]) \
            if j < nb else np.inf
        if adv_a <= adv_b:
            tris.append((a[i % na], b[j % nb], a[(i + 1) % na]))
            i += 1
        else:
            tris.append((a[i % na], b[(j + 1) % nb], b[j % nb]))
            j += 1
    return np.asarray(tris, dtype=np.int64)


def complete_body(visible: TriMesh, template: BodyTemplate,
                  tau: float = 0.02) -> CompletionResult:
    """Merge the fitted visible body with the hidden template part.

    Template faces whose centroids lie within ``tau`` of the visible surface
    are dropped (the fit already covers them); what remains is stitched to
    the visible boundary loop by loop. A loop-count mismatch returns the
    plain union with ``stitch_fallback`` set instead of guessing.
    """
    if visible.n_faces == 0:
        raise PipelineError("visible body is empty")
    tv = template.surface.vertices
    tf = template.surface.faces
    centroids = tv[tf].mean(axis=1)
    dist, _, _ = signed_distance(centroids, visible)
    keep = np.abs(dist) > tau
    kept = int(keep.sum())
    if kept == 0:
        out = TriMesh(visible.vertices, visible.faces,
                      np.full(visible.n_faces, BODY, dtype=np.int8),
                      visible.vertex_colors, validate=False)
        return CompletionResult(out, False, 0, 0)
    hidden = template.surface.submesh(keep)
    n_vis = visible.n_vertices
    all_verts = np.vstack([visible.vertices, hidden.vertices])
    all_faces = [visible.faces, hidden.faces + n_vis]
    colors = None
    if visible.vertex_colors is not None:
        colors = np.vstack([visible.vertex_colors,
                            np.full((hidden.n_vertices, 3), 0.5)])
    loops_a = boundary_loops(visible)
    loops_b = [lp + n_vis for lp in boundary_loops(hidden)]
    stitched = 0
    fallback = len(loops_a) != len(loops_b)
    if not fallback:
        used = set()
        for la in loops_a:
            ca = all_verts[la].mean(axis=0)
            best, best_d = None, np.inf
            for k, lb in enumerate(loops_b):
                if k in used:
                    continue
                d = float(np.linalg.norm(all_verts[lb].mean(axis=0) - ca))
                if d < best_d:
                    best, best_d = k, d
            used.add(best)
            all_faces.append(_stitch_loops(la, loops_b[best], all_verts))
            stitched += 1
    faces = np.vstack(all_faces)
    out = TriMesh(all_verts, faces, np.full(len(faces), BODY, dtype=np.int8),
                  colors, validate=False)
    if not fallback and not out.is_watertight():
        fallback = True
    return CompletionResult(out, fallback, kept, stitched)


# ---------------------------------------------------------------------------
# stage 2: detail fitting


def _make_models(n_frames: int, config: RunConfig) -> dict:
    kwargs = dict(octaves=config.octaves, latent_dim=config.latent_dim,
                  hidden=config.hidden, n_hidden_layers=config.n_hidden_layers,
                  clamp=config.clamp)
    return {
        "cloth": NonRigidField.create(n_frames, config.seed * 2 + 101, **kwargs),
        "body": NonRigidField.create(n_frames, config.seed * 2 + 102, **kwargs),
    }


def _model_param_blocks(models: dict) -> tuple[dict, dict]:
    params, kinds = {}, {}
    for side in ("cloth", "body"):
        f = models[side]
        for i, arr in enumerate(f.param_blocks()):
            params[f"{side}/p{i}"] = arr
            kinds[f"{side}/p{i}"] = "net"
        params[f"{side}/latents"] = f.latents
        kinds[f"{side}/latents"] = "latent"
    return params, kinds


def _accumulate_field_grads(grads: dict, side: str, fg, frame: int,
                            latent_shape, scale: float) -> None:
    if fg is None:
        return
    blocks = []
    for dw, db in zip(fg.d_weights, fg.d_biases):
        blocks.append(dw)
        blocks.append(db)
    for i, g in enumerate(blocks):
        key = f"{side}/p{i}"
        grads[key] = grads.get(key, 0.0) + scale * g
    key = f"{side}/latents"
    if key not in grads:
        grads[key] = np.zeros(latent_shape)
    grads[key][frame] += scale * fg.d_latent


def fit_sequence(template: TemplateResult, frames: list, config: RunConfig,
                 out_dir: str | Path | None = None,
                 resume_from: str | Path | None = None,
                 iterations: int | None = None) -> SequenceResult:
    """Refine per-frame detail with the canonical template frozen.

    Only the two displacement networks and the per-frame latent codes move;
    the canonical mesh, its labels, and the grid fields stay fixed so the
    output sequence shares one topology.
    """
    if not frames:
        raise PipelineError("fit_sequence needs at least one supervision frame")
    cap = config.sequence_iterations if iterations is None else int(iterations)
    if cap < 0:
        raise PipelineError(f"negative iteration count {cap}")
    canonical = template.canonical
    if canonical.face_labels is None:
        raise PipelineError("canonical template mesh carries no layer labels")
    n_frames = len(frames)
    start = 0
    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        meta = ck["meta"]
        if meta.get("stage") != "sequence":
            raise PipelineError(f"checkpoint at {resume_from} is not a sequence stage")
        if meta.get("config_hash") != config.config_hash():
            raise PipelineError("checkpoint config hash does not match this run")
        if "models" not in ck:
            raise PipelineError(f"checkpoint at {resume_from} has no models.bin")
        models = ck["models"]
        if models["cloth"].n_frames != n_frames:
            raise PipelineError(f"checkpoint has {models['cloth'].n_frames} latent "
                                f"codes, run has {n_frames} frames")
        start = int(meta["step"])
    else:
        models = _make_models(n_frames, config)
    deform = DeformModels(template.template, models["cloth"], models["body"])
    params, kinds = _model_param_blocks(models)
    lrs = {k: (config.lr_networks if kind == "net" else config.lr_latents)
           for k, kind in kinds.items()}
    state = OptimState(params=params, lrs=lrs)
    if resume_from is not None:
        load_optim(Path(resume_from) / "optim.bin", state)

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    log = _LossLog(out_path / "sequence_loss.jsonl" if out_path else None)
    rcfg = SoftRasterConfig(sigma=config.sigma, gamma=config.gamma,
                            band=config.band, cull_back=True)
    pixel_sets = [build_pixel_sets(fr.mask_body, fr.mask_cloth) for fr in frames]
    sweights = compute_skin_weights(canonical.vertices, template.template)
    cmask = cloth_vertex_mask(canonical)
    body_face_mask = canonical.face_labels == BODY
    cloth_face_mask = canonical.face_labels == CLOTH
    latent_shape = models["cloth"].latents.shape

    def lbs_only_normal(t: int) -> float:
        fr = frames[t]
        posed = lbs_apply(canonical.vertices, sweights, fr.pose, template.template)
        pm = TriMesh(posed, canonical.faces, canonical.face_labels,
                     canonical.vertex_colors, validate=False)
        buf = rasterize([pm], fr.camera, rcfg, with_normals=True)
        return normal_loss(buf.normal, fr.normal)[0]

    baseline = _parallel_map(lbs_only_normal, list(range(n_frames)), config.threads)

    def meta_dict(step: int) -> dict:
        return {"stage": "sequence", "step": step, "config_hash": config.config_hash(),
                "seed": config.seed, "n_frames": n_frames}

    def checkpoint(step: int) -> None:
        if out_path is not None:
            save_checkpoint(out_path / "checkpoint", fields=template.fields,
                            colors=template.grid_colors, optim=state,
                            meta=meta_dict(step), models=models)

    converged = False
    it = start
    while it < cap:
        batch = _select_frames(config.seed, it, n_frames, config.views_per_iter)
        scale = 1.0 / len(batch)

        def frame_job(t: int):
            fr = frames[t]
            posed_mesh, cache = deform_to_observed(canonical, sweights, fr.pose,
                                                   deform, t)
            buf = rasterize([posed_mesh], fr.camera, rcfg, with_normals=True)
            body_sub = posed_mesh.submesh(body_face_mask)
            cloth_pts = posed_mesh.vertices[cmask]
            rep, g = total_objective(
                STAGE_DETAIL, config.weights, render=buf, truth=fr,
                pixels=pixel_sets[t],
                cloth_points=cloth_pts if cmask.any() and body_sub.n_faces else None,
                body_mesh=body_sub if body_sub.n_faces else None,
                deformed_mesh=posed_mesh)
            rg = rasterize_backward(buf,
                                    d_rgb_body=g.get("rgb_body"),
                                    d_rgb_cloth=g.get("rgb_cloth"),
                                    d_label_body=g.get("label_body"),
                                    d_label_cloth=g.get("label_cloth"),
                                    d_normal=g.get("normal"))
            d_posed = rg.d_vertices[0].copy()
            if "cloth_points" in g:
                d_posed[cmask] += g["cloth_points"]
            if "deformed_vertices" in g:
                d_posed += g["deformed_vertices"]
            _, cg, bg = deform_backward(deform, cache, d_posed)
            return rep, cg, bg, t

        results = _parallel_map(frame_job, list(batch), config.threads)
        grads: dict = {}
        for _, cg, bg, t in results:
            _accumulate_field_grads(grads, "cloth", cg, t, latent_shape, scale)
            _accumulate_field_grads(grads, "body", bg, t, latent_shape, scale)
        adam_step(state, grads)
        merged = _merge_reports(STAGE_DETAIL, [r for r, _, _, _ in results], None)
        line = {"iteration": it, "frames": [int(t) for t in batch]}
        line.update(merged.line())
        log.write(line)
        it += 1
        if it % config.checkpoint_interval == 0 or it == cap:
            checkpoint(it)
        if _window_converged(log.totals, config.convergence_window,
                             config.convergence_tol):
            converged = True
            checkpoint(it)
            break

    if out_path is not None:
        checkpoint(it)
    cloth_meshes, body_meshes, reports = [], [], []
    final_normal, interpen = [], []
    for t, fr in enumerate(frames):
        posed_mesh, _ = deform_to_observed(canonical, sweights, fr.pose, deform, t)
        buf = rasterize([posed_mesh], fr.camera, rcfg, with_normals=True)
        body_sub = posed_mesh.submesh(body_face_mask)
        cloth_pts = posed_mesh.vertices[cmask]
        rep, _ = total_objective(
            STAGE_DETAIL, config.weights, render=buf, truth=fr, pixels=pixel_sets[t],
            cloth_points=cloth_pts if cmask.any() and body_sub.n_faces else None,
            body_mesh=body_sub if body_sub.n_faces else None,
            deformed_mesh=posed_mesh)
        reports.append(rep)
        final_normal.append(normal_loss(buf.normal, fr.normal)[0])
        if cmask.any() and body_sub.n_faces:
            d, _, _ = signed_distance(cloth_pts, body_sub)
            interpen.append(int(np.sum(d < 0.0)))
        else:
            interpen.append(0)
        cloth_meshes.append(posed_mesh.submesh(cloth_face_mask))
        body_meshes.append(posed_mesh.submesh(body_face_mask))
        if out_path is not None:
            write_mesh(out_path / f"frame_{t}_cloth.ply", cloth_meshes[-1])
            write_mesh(out_path / f"frame_{t}_body.ply", body_meshes[-1])
    return SequenceResult(cloth_meshes=cloth_meshes, body_meshes=body_meshes,
                          reports=reports, baseline_normal=baseline,
                          final_normal=final_normal, interpenetration=interpen,
                          iterations_run=it, converged=converged)


def load_template_result(out_dir: str | Path, config: RunConfig) -> TemplateResult:
    """Rebuild a TemplateResult from a template run's output directory.

    The canonical mesh is re-derived from the checkpointed fields, which
    reproduces the original bit for bit under the determinism contract.
    """
    ck = load_checkpoint(Path(out_dir) / "checkpoint")
    if ck["meta"].get("stage") != "template":
        raise PipelineError(f"{out_dir} does not hold a template checkpoint")
    template = build_template()
    grid = make_grid(config.resolution, config.bounds)
    fields, colors = ck["fields"], ck["colors"]
    if len(fields.sdf) != grid.n_vertices:
        raise PipelineError("checkpoint field size does not match the grid config")
    ext = extract_surface(grid, fields, colors)
    if ext.mesh.n_faces == 0:
        raise PipelineError("checkpointed fields extract to an empty surface")
    split = split_surface(ext.mesh, ext.hm)
    canonical, agg_report = aggregate(split.mesh, config.alpha_body, config.alpha_cloth)
    canonical, _ = collapse_slivers(canonical)
    garment = canonical.submesh(canonical.face_labels == CLOTH)
    visible_body = canonical.submesh(canonical.face_labels == BODY)
    completion = complete_body(visible_body, template, config.tau_merge)
    return TemplateResult(canonical=canonical, garment=garment,
                          body_full=completion.mesh,
                          stitch_fallback=completion.stitch_fallback,
                          aggregation=agg_report,
                          final_report=LossReport(stage=STAGE_TEMPLATE),
                          fields=fields, grid_colors=colors, grid=grid,
                          template=template)
