"""Error classes shared across the engine.

Every error carries a stable class name so the CLI can emit
machine-parseable one-line failures.
"""


class VoxgenError(Exception):
    """Base class for all engine errors."""


class OddResolution(VoxgenError):
    """Pooling requires an even resolution on every axis."""


class TopologyMismatch(VoxgenError):
    """Two grids that must share (or nest) active voxel sets do not."""


class LevelOverflow(VoxgenError):
    """Subdivision past the finest pyramid level."""


class EmptyResult(VoxgenError):
    """An operation produced a grid with no active voxels."""


class OutOfBounds(VoxgenError):
    """A voxel box falls outside the grid resolution."""


class EmptyMesh(VoxgenError):
    """The input mesh has no usable triangles."""


class NoSurfaceVoxels(VoxgenError):
    """No sample voxel intersects the mesh surface."""


class IndivisibleResolution(VoxgenError):
    """Finest resolution is not divisible by 2^(L-1)."""


class ShapeMismatch(VoxgenError):
    """Tensor shapes disagree with the layer or parameter plan."""


class NonFiniteGradient(VoxgenError):
    """A gradient contained NaN or Inf; the run should abort."""


class Divergence(VoxgenError):
    """Training loss became non-finite."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class EmptySample(VoxgenError):
    """Pruning removed every voxel of a generated level."""


class EmptyInput(VoxgenError):
    """A metric was called with an empty point set."""


class ResolutionMismatch(VoxgenError):
    """Occupancy grids being compared have different resolutions."""
