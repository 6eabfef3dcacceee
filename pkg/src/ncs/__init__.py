"""Coarse-plus-detail neural surface fitting.

One triangle mesh is overfit by a small MLP (the smooth base surface) plus a
patch-based fine branch: per-patch latent grids decoded by a shared residual
upsampling CNN into displacement fields expressed in local reference frames.
"""

__version__ = "0.1.0"

from .geometry import TriMesh, chamfer_distance, load_mesh, normalize_unit_sphere
from .model import ArchConfig, ModelParams, build_model, evaluate
from .parameterization import DiskChart, embed_disk
from .patching import PatchSet, extract_patches
from .training import TrainSchedule, fit

__all__ = [
    "TriMesh", "chamfer_distance", "load_mesh", "normalize_unit_sphere",
    "ArchConfig", "ModelParams", "build_model", "evaluate",
    "DiskChart", "embed_disk",
    "PatchSet", "extract_patches",
    "TrainSchedule", "fit",
    "__version__",
]
