"""Synthetic head-annotation pipeline: parametric meshes, camera sampling,
rasterized and volumetric depth, segmentation, landmarks, mesh-to-volume
alignment, loss formulas, and deterministic dataset generation."""

__version__ = "0.1.0"

from . import align, camera, dataset, geometry, headmodel, io_formats, \
    losses, raster, volume  # noqa: F401
