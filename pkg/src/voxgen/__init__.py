"""voxgen: single-exemplar 3D shape variation on sparse voxel grids."""

from . import diffuse, exemplar, fixtures, grid, metrics, net, pipeline
from .errors import VoxgenError

__all__ = [
    "diffuse",
    "exemplar",
    "fixtures",
    "grid",
    "metrics",
    "net",
    "pipeline",
    "VoxgenError",
]

__version__ = "0.1.0"
