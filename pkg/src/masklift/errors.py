"""Exception hierarchy shared across the toolkit.

Two families matter to the CLI: scene/file loading problems (exit code 2)
and validation/config problems (exit code 3).
"""


class MaskliftError(Exception):
    """Base class for all toolkit errors."""


class SceneLoadError(MaskliftError):
    """A scene directory or one of its required files could not be loaded."""


class PlyParseError(SceneLoadError):
    """A PLY file is malformed.  Carries the offending header line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(MaskliftError, ValueError):
    """Input data violates a documented precondition."""


class InvalidDepthError(ValidationError):
    """Depth value unusable for unprojection (zero or negative)."""


class InvalidPoseError(ValidationError):
    """Pose matrix is not a rigid transform within tolerance."""


class MalformedInputError(ValidationError):
    """Array shapes, sizes, or index ranges are inconsistent."""


class ConfigError(ValidationError):
    """A configuration value is outside its legal range."""


class AlignmentError(ValidationError):
    """Two clouds expected to share geometry do not line up."""
