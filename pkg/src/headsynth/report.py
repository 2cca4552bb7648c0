"""Dataset preview figures and a delimited summary table.

Renders one PNG per sample (image/depth/segmentation/landmark panels plus
the alignment loss trace) and a summary.csv with per-sample scalars, so a
generated dataset can be reviewed without loading arrays by hand.
"""

from __future__ import annotations

import csv
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import io_formats
from .dataset import read_bundle

SUMMARY_FIELDS = ["index", "seed", "fov_deg", "azimuth_rad", "elevation_rad",
                  "covered_px", "visible_landmarks", "depth_loss",
                  "chamfer_loss", "converged"]


def bundle_figure(bundle):
    """Build (not save) the preview figure for one AnnotationBundle."""
    panels = [("rgb", bundle.rgb), ("volumetric depth", bundle.depth_vol),
              ("mesh depth", bundle.depth_mesh), ("classes", bundle.seg),
              ("landmarks", None), ("loss trace", None)]
    fig, axes = plt.subplots(2, 3, figsize=(10, 6.5))
    h, w = bundle.depth_mesh.values.shape
    for ax, (title, payload) in zip(axes.ravel(), panels):
        ax.set_title(title, fontsize=9)
        if title == "rgb":
            if payload is None:
                ax.text(0.5, 0.5, "not generated", ha="center", va="center")
                ax.set_axis_off()
            else:
                ax.imshow(payload)
        elif title.endswith("depth"):
            if payload is None:
                ax.text(0.5, 0.5, "not generated", ha="center", va="center")
                ax.set_axis_off()
            else:
                vals = np.where(payload.valid, payload.values, np.nan)
                im = ax.imshow(vals, cmap="viridis")
                fig.colorbar(im, ax=ax, fraction=0.046)
        elif title == "classes":
            ax.imshow(payload.values, cmap="tab10", vmin=0, vmax=9,
                      interpolation="nearest")
        elif title == "landmarks":
            ax.imshow(bundle.seg.values > 0, cmap="gray", vmin=0, vmax=1)
            uv = bundle.landmarks2d
            vis = bundle.landmarks_visible
            ax.scatter(uv[vis, 0] * w, uv[vis, 1] * h, s=6, c="lime")
            ax.scatter(uv[~vis, 0] * w, uv[~vis, 1] * h, s=6, c="red",
                       marker="x")
        elif title == "loss trace":
            if bundle.report is not None and bundle.report.loss_trace:
                ax.plot(bundle.report.loss_trace, marker="o", ms=3)
                ax.set_yscale("log")
                ax.set_xlabel("step", fontsize=8)
            else:
                ax.text(0.5, 0.5, "no alignment", ha="center", va="center")
                ax.set_axis_off()
        if title not in ("loss trace",):
            ax.set_xticks([])
            ax.set_yticks([])
    fig.suptitle(f"sample {bundle.index:08d}  seed {bundle.seed[:12]}…",
                 fontsize=10)
    fig.tight_layout()
    return fig


def save_bundle_figure(bundle, path):
    fig = bundle_figure(bundle)
    fig.savefig(path, dpi=110)
    plt.close(fig)


def summary_row(bundle):
    rep = bundle.report
    return {
        "index": bundle.index,
        "seed": bundle.seed,
        "fov_deg": f"{bundle.rig.intrinsics.fov_deg:.6f}",
        "azimuth_rad": f"{bundle.rig.azimuth:.6f}",
        "elevation_rad": f"{bundle.rig.elevation:.6f}",
        "covered_px": int(np.count_nonzero(bundle.seg.values)),
        "visible_landmarks": int(np.count_nonzero(bundle.landmarks_visible)),
        "depth_loss": "" if rep is None else f"{rep.depth_loss:.9g}",
        "chamfer_loss": "" if rep is None else f"{rep.chamfer_loss:.9g}",
        "converged": "" if rep is None else str(bool(rep.converged)).lower(),
    }


def dataset_report(dataset_dir, out_dir, max_figures=None):
    """Write per-sample preview PNGs and summary.csv for a dataset.

    Returns the list of paths written.
    """
    manifest = io_formats.load_json(os.path.join(dataset_dir, "manifest.json"))
    os.makedirs(out_dir, exist_ok=True)
    written = []
    rows = []
    for i, entry in enumerate(manifest["samples"]):
        bundle = read_bundle(os.path.join(dataset_dir, entry["dir"]))
        rows.append(summary_row(bundle))
        if max_figures is None or i < max_figures:
            path = os.path.join(out_dir, f"{entry['dir']}.png")
            save_bundle_figure(bundle, path)
            written.append(path)
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    written.append(os.path.join(out_dir, "summary.csv"))
    return written
