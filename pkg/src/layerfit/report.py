"""Figures and metric tables written alongside a run's machine output.

Every writer is headless (Agg backend), takes explicit paths, and returns
the path it wrote so callers can list artifacts in their summary JSON.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

METRIC_KEYS = ("cloth_cd", "body_cd", "all_cd", "iou")


def read_loss_log(path: str | Path) -> list:
    """Parse a JSON-lines loss log, skipping event-only lines."""
    rows = []
    with open(path) as fh:
        for raw in fh:
            raw = raw.strip()
            if not raw:
                continue
            line = json.loads(raw)
            if "total" in line:
                rows.append(line)
    return rows


def write_loss_curve(log_path: str | Path, out_path: str | Path,
                     title: str = "optimization loss") -> Path:
    """Plot total and per-term loss series from a JSON-lines log."""
    rows = read_loss_log(log_path)
    out_path = Path(out_path)
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    if rows:
        it = np.array([r["iteration"] for r in rows])
        terms = [k for k in rows[0]
                 if k not in ("iteration", "frames", "stage")
                 and isinstance(rows[0][k], (int, float))]
        # totals first so they take the first color cycle slot
        for key in sorted(terms, key=lambda k: (k != "total", k)):
            series = np.array([float(r.get(key, np.nan)) for r in rows])
            lw = 1.8 if key == "total" else 0.9
            ax.plot(it, series, label=key, linewidth=lw)
        finite = np.array([float(r["total"]) for r in rows])
        if len(finite) and np.all(finite > 0.0):
            ax.set_yscale("log")
        ax.legend(fontsize=7, ncol=2, loc="upper right")
    else:
        ax.text(0.5, 0.5, "no loss entries", ha="center", va="center",
                transform=ax.transAxes)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.savefig(out_path, dpi=300, bbox_inches="tight")
    plt.close(fig)
    return out_path


def summarize_metrics(per_frame: list) -> dict:
    """Attach the across-frame mean to a list of per-frame metric dicts."""
    mean = {k: float(np.mean([r[k] for r in per_frame])) if per_frame else 0.0
            for k in METRIC_KEYS}
    return {"frames": per_frame, "mean": mean}


def write_metrics_csv(summary: dict, out_path: str | Path) -> Path:
    out_path = Path(out_path)
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("frame",) + METRIC_KEYS)
        for row in summary["frames"]:
            writer.writerow([row["frame"]] + [repr(row[k]) for k in METRIC_KEYS])
        writer.writerow(["mean"] + [repr(summary["mean"][k]) for k in METRIC_KEYS])
    return out_path


def write_metrics_json(summary: dict, out_path: str | Path) -> Path:
    out_path = Path(out_path)
    out_path.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return out_path


def write_metrics_figure(summary: dict, out_path: str | Path) -> Path:
    """Two-panel figure: per-frame Chamfer distances and label IoU."""
    out_path = Path(out_path)
    rows = summary["frames"]
    frames = [r["frame"] for r in rows]
    fig, (ax_cd, ax_iou) = plt.subplots(1, 2, figsize=(9.0, 3.6))
    for key in ("cloth_cd", "body_cd", "all_cd"):
        ax_cd.plot(frames, [r[key] for r in rows], marker="o",
                   markersize=3, label=key)
    ax_cd.set_xlabel("frame")
    ax_cd.set_ylabel("Chamfer distance (m$^2$)")
    ax_cd.legend(fontsize=8)
    ax_cd.grid(True, alpha=0.3)
    ax_iou.plot(frames, [r["iou"] for r in rows], marker="o", markersize=3,
                color="tab:green")
    ax_iou.axhline(summary["mean"]["iou"], linestyle="--", linewidth=0.8,
                   color="tab:green", alpha=0.6)
    ax_iou.set_xlabel("frame")
    ax_iou.set_ylabel("cloth label IoU")
    ax_iou.set_ylim(0.0, 1.05)
    ax_iou.grid(True, alpha=0.3)
    fig.savefig(out_path, dpi=300, bbox_inches="tight")
    plt.close(fig)
    return out_path


def write_metrics(summary: dict, out_dir: str | Path, stem: str = "metrics") -> dict:
    """Write the CSV + JSON + PNG triple for one evaluation; returns paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return {
        "csv": str(write_metrics_csv(summary, out_dir / f"{stem}.csv")),
        "json": str(write_metrics_json(summary, out_dir / f"{stem}.json")),
        "figure": str(write_metrics_figure(summary, out_dir / f"{stem}.png")),
    }
