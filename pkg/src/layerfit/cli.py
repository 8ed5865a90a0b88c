"""Command-line entry point.

Subcommands cover the full loop: ``synth`` writes a ground-truth scene,
``fit-template`` and ``fit-sequence`` run the two optimization stages,
``eval`` scores a result against ground truth, and ``export`` turns a
checkpoint back into meshes and a preview render.

One JSON summary per invocation goes to standard output; progress and
diagnostics go to standard error.  Exit codes: 0 success, 1 runtime abort,
2 invalid input.  Option precedence is CLI flag > config file > built-in
default; ``D3H_THREADS`` caps the worker count from the environment.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .camera import look_at
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .mesh import BODY, CLOTH, TriMesh
from .mesh_io import read_mesh, write_mesh
from .pipeline import (fit_sequence, fit_template, load_template_result)
from .render import SoftRasterConfig, rasterize, save_png
from .report import summarize_metrics, write_loss_curve, write_metrics
from .synth import (SynthError, build_scene, chamfer, label_iou, load_scene_spec,
                    load_supervision, render_supervision, save_scene_spec,
                    save_supervision)

log = logging.getLogger("layerfit")


# ---------------------------------------------------------------------------
# shared plumbing


def _resolve_config(args) -> RunConfig:
    config = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    config = apply_overrides(config, {
        "seed": getattr(args, "seed", None),
        "resolution": getattr(args, "resolution", None),
        "render_size": getattr(args, "render_size", None),
    })
    cap = os.environ.get("D3H_THREADS")
    if cap is not None:
        try:
            cap = int(cap)
        except ValueError as exc:
            raise ConfigError(f"D3H_THREADS must be an integer, got {cap!r}") from exc
        if cap < 1:
            raise ConfigError(f"D3H_THREADS must be >= 1, got {cap}")
        config = apply_overrides(config, {"threads": min(config.threads, cap)})
    return config


def _load_frames(directory: Path) -> list:
    if not directory.is_dir():
        raise SynthError(f"supervision directory not found: {directory}")
    n = len(list(directory.glob("frame_*_rgb.png")))
    if n == 0:
        raise SynthError(f"no supervision frames in {directory}")
    return [load_supervision(directory, t) for t in range(n)]


def _emit(summary: dict) -> None:
    print(json.dumps(summary, sort_keys=True))


def _report_dict(report) -> dict:
    return {"total": report.total, **{k: float(v) for k, v in report.terms.items()}}


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    spec_path = Path(args.spec)
    if not spec_path.is_file():
        raise SynthError(f"spec not found: {spec_path}")
    spec = load_scene_spec(spec_path)
    overrides = {"seed": args.seed, "image_size": args.render_size,
                 "body_resolution": args.resolution}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if overrides:
        spec = dataclasses.replace(spec, **overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log.info("building scene: %d frames at %dx%d, seed %d",
             spec.n_frames, spec.image_size, spec.image_size, spec.seed)
    scene = build_scene(spec)
    for t in range(spec.n_frames):
        frame = render_supervision(scene, t)
        save_supervision(out, frame)
        write_mesh(out / f"frame_{t}_cloth.ply", scene.cloth_frames[t])
        write_mesh(out / f"frame_{t}_body.ply", scene.body_frames[t])
        log.info("frame %d written (clearance %.4f m)", t, scene.clearances[t])
    save_scene_spec(out / "scene_spec.json", spec)
    _emit({"command": "synth", "out": str(out), "frames": spec.n_frames,
           "image_size": spec.image_size, "seed": spec.seed,
           "min_clearance": float(np.min(scene.clearances))})
    return 0


def cmd_fit_template(args) -> int:
    config = _resolve_config(args)
    frames = _load_frames(Path(args.supervision))
    out = Path(args.out)
    log.info("template stage: %d frames, grid %d, %d threads",
             len(frames), config.resolution, config.threads)
    result = fit_template(frames, config, out_dir=out,
                          resume_from=args.checkpoint, iterations=args.iterations)
    curve = write_loss_curve(out / "template_loss.jsonl",
                             out / "template_loss.png",
                             title="template stage loss")
    log.info("template stage done: %d iterations, converged=%s",
             result.iterations_run, result.converged)
    _emit({"command": "fit-template", "out": str(out),
           "iterations_run": result.iterations_run,
           "converged": result.converged, "rollbacks": result.rollbacks,
           "canonical_faces": result.canonical.n_faces,
           "cloth_faces": int(np.sum(result.canonical.face_labels == CLOTH)),
           "stitch_fallback": result.stitch_fallback,
           "final_report": _report_dict(result.final_report),
           "loss_curve": str(curve)})
    return 0


def cmd_fit_sequence(args) -> int:
    config = _resolve_config(args)
    frames = _load_frames(Path(args.supervision))
    template = load_template_result(Path(args.template), config)
    out = Path(args.out)
    log.info("detail stage: %d frames from template at %s", len(frames), args.template)
    result = fit_sequence(template, frames, config, out_dir=out,
                          resume_from=args.checkpoint, iterations=args.iterations)
    curve = write_loss_curve(out / "sequence_loss.jsonl",
                             out / "sequence_loss.png",
                             title="detail stage loss")
    log.info("detail stage done: %d iterations, interpenetrations %s",
             result.iterations_run, result.interpenetration)
    _emit({"command": "fit-sequence", "out": str(out),
           "iterations_run": result.iterations_run,
           "converged": result.converged,
           "baseline_normal": [float(v) for v in result.baseline_normal],
           "final_normal": [float(v) for v in result.final_normal],
           "interpenetration": [int(v) for v in result.interpenetration],
           "loss_curve": str(curve)})
    return 0


def _merge_labeled(cloth: TriMesh, body: TriMesh) -> TriMesh:
    verts = np.vstack([cloth.vertices, body.vertices])
    faces = np.vstack([cloth.faces, body.faces + len(cloth.vertices)])
    labels = np.concatenate([np.full(cloth.n_faces, CLOTH),
                             np.full(body.n_faces, BODY)])
    return TriMesh(verts, faces, labels, validate=False)


def _count_result_frames(directory: Path) -> int:
    n = 0
    while (directory / f"frame_{n}_cloth.ply").is_file():
        n += 1
    return n


def cmd_eval(args) -> int:
    config = _resolve_config(args)
    result_dir, gt_dir = Path(args.result), Path(args.gt)
    for d in (result_dir, gt_dir):
        if not d.is_dir():
            raise SynthError(f"directory not found: {d}")
    n_res = _count_result_frames(result_dir)
    n_gt = _count_result_frames(gt_dir)
    if n_res == 0:
        raise SynthError(f"no frame meshes (frame_0_cloth.ply ...) in {result_dir}")
    if n_res != n_gt:
        raise SynthError(f"frame count mismatch: {n_res} result vs {n_gt} ground truth")
    lo, hi = config.bounds
    cell = max((h - l) / config.resolution for l, h in zip(lo, hi))
    per_frame = []
    for t in range(n_res):
        rc = read_mesh(result_dir / f"frame_{t}_cloth.ply")
        rb = read_mesh(result_dir / f"frame_{t}_body.ply")
        gc = read_mesh(gt_dir / f"frame_{t}_cloth.ply")
        gb = read_mesh(gt_dir / f"frame_{t}_body.ply")
        row = {"frame": t,
               "cloth_cd": chamfer(rc, gc),
               "body_cd": chamfer(rb, gb),
               "all_cd": chamfer(_merge_labeled(rc, rb), _merge_labeled(gc, gb)),
               "iou": label_iou(_merge_labeled(rc, rb), gc, cell)}
        per_frame.append(row)
        log.info("frame %d: cloth %.3e, body %.3e, all %.3e, iou %.3f",
                 t, row["cloth_cd"], row["body_cd"], row["all_cd"], row["iou"])
    summary = summarize_metrics(per_frame)
    summary["command"] = "eval"
    out = Path(args.out) if args.out else result_dir
    summary["artifacts"] = write_metrics(summary, out)
    _emit(summary)
    return 0


def cmd_export(args) -> int:
    config = _resolve_config(args)
    run_dir = Path(args.run)
    result = load_template_result(run_dir, config)
    out = Path(args.out) if args.out else run_dir / "export"
    out.mkdir(parents=True, exist_ok=True)
    write_mesh(out / "canonical.ply", result.canonical)
    write_mesh(out / "garment.ply", result.garment)
    write_mesh(out / "body.ply", result.body_full)
    size = config.render_size
    cam = look_at((0.0, 0.35, 2.0), (0.0, 0.0, 0.0), fov_deg=50.0,
                  width=size, height=size)
    buf = rasterize([result.canonical], cam, SoftRasterConfig(hard=True))
    save_png(buf.rgb, out / "preview.png")
    log.info("exported %d canonical faces to %s", result.canonical.n_faces, out)
    _emit({"command": "export", "out": str(out),
           "canonical_faces": result.canonical.n_faces,
           "garment_faces": result.garment.n_faces,
           "body_faces": result.body_full.n_faces,
           "preview": str(out / "preview.png")})
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(sub, *, fit: bool = False) -> None:
    sub.add_argument("--config", help="TOML or JSON run configuration file")
    sub.add_argument("--seed", type=int, help="override the random seed")
    sub.add_argument("--resolution", type=int, help="override the grid resolution")
    sub.add_argument("--render-size", type=int, dest="render_size",
                     help="override the render/image size in pixels")
    if fit:
        sub.add_argument("--iterations", type=int,
                         help="cap the iteration count (0 writes the "
                              "initialization state and exits)")
        sub.add_argument("--checkpoint",
                         help="resume from this checkpoint directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="layerfit",
        description="Two-layer garment/body surface reconstruction from "
                    "multi-view mask, color, and normal supervision.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene with "
                                     "ground-truth supervision and meshes")
    p.add_argument("spec", help="scene spec file (TOML or JSON)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the scene seed")
    p.add_argument("--resolution", type=int,
                   help="override the body mesh resolution")
    p.add_argument("--render-size", type=int, dest="render_size",
                   help="override the supervision image size")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit-template", help="optimize the canonical clothed "
                                            "template from supervision frames")
    p.add_argument("supervision", help="directory of supervision frames")
    p.add_argument("--out", required=True, help="run output directory")
    _add_common(p, fit=True)
    p.set_defaults(func=cmd_fit_template)

    p = sub.add_parser("fit-sequence", help="fit per-frame detail deformation "
                                            "on top of a template run")
    p.add_argument("supervision", help="directory of supervision frames")
    p.add_argument("--template", required=True,
                   help="output directory of the template run to build on")
    p.add_argument("--out", required=True, help="run output directory")
    _add_common(p, fit=True)
    p.set_defaults(func=cmd_fit_sequence)

    p = sub.add_parser("eval", help="score per-frame result meshes against "
                                    "ground truth")
    p.add_argument("result", help="directory with frame_{t}_cloth/body.ply")
    p.add_argument("gt", help="ground-truth directory with the same layout")
    p.add_argument("--out", help="artifact directory (default: result dir)")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="turn a template checkpoint into meshes "
                                      "and a preview render")
    p.add_argument("run", help="template run directory holding checkpoint/")
    p.add_argument("--out", help="export directory (default: <run>/export)")
    _add_common(p)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        log.error("%s", exc)
        return 2
    except RuntimeError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
