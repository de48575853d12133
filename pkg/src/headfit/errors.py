"""Exception types raised across the package."""


class HeadfitError(Exception):
    """Base class for all package errors."""


class ConfigError(HeadfitError, ValueError):
    """Invalid configuration or argument dimensions."""


class ModelFileError(HeadfitError):
    """Corrupt or inconsistent ``.mmhead`` file."""


class MapFileError(HeadfitError):
    """Corrupt normal-map or landmark file."""


class DegenerateMeshError(HeadfitError):
    """Vertex normals could not be computed for some vertices."""

    def __init__(self, indices):
        self.indices = [int(i) for i in indices]
        shown = self.indices[:10]
        more = "" if len(self.indices) <= 10 else f" (+{len(self.indices) - 10} more)"
        super().__init__(f"degenerate one-ring at vertices {shown}{more}")


class BehindCameraError(HeadfitError):
    """A point projects from at or behind the near plane."""


class EmptyRenderError(HeadfitError):
    """No triangle of the mesh is visible from the camera."""


class EmptyResidualError(HeadfitError):
    """An energy term has nothing to evaluate."""


class PrealignmentError(HeadfitError):
    """Landmark-only pose initialisation failed."""


class SolverError(HeadfitError):
    """The Levenberg-Marquardt solver could not make progress."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DegenerateConfigurationError(HeadfitError):
    """Point sets too degenerate for a rigid fit."""


class AlignmentError(HeadfitError):
    """ICP found no usable correspondences."""
