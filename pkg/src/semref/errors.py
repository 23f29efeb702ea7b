"""Exception types shared across the package."""


class SemrefError(Exception):
    """Base class for all package errors."""


class MeshTopologyError(SemrefError):
    """Mesh connectivity violates the edge-manifold requirement."""


class DegenerateFaceError(SemrefError):
    """A face has collinear or coincident vertices."""


class DegenerateGeometryError(SemrefError):
    """A local neighborhood has zero area or is otherwise unusable."""


class FormatError(SemrefError):
    """A dataset file does not match its expected format."""


class ConfigError(SemrefError):
    """Configuration or manifest contents are invalid."""
