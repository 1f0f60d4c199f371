"""Exception types raised across the pipeline."""


class VStainError(Exception):
    """Base class for all pipeline errors."""


class RoiParseError(VStainError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedGeometryError(VStainError):
    def __init__(self, geometry_type):
        super().__init__(f"unsupported geometry type: {geometry_type!r}")
        self.geometry_type = geometry_type


class EmptyRoiError(VStainError):
    pass


class RasterIOError(VStainError):
    pass


class ImageFormatError(VStainError):
    pass


class UpsampleUnsupportedError(VStainError):
    pass


class InsufficientTissueError(VStainError):
    pass


class DegenerateStainError(VStainError):
    pass


class GridMismatchError(VStainError):
    pass


class DuplicatePatchError(VStainError):
    pass


class PatchRangeError(VStainError):
    pass


class BackendFailureError(VStainError):
    def __init__(self, message, returncode=None, stderr=""):
        super().__init__(message)
        self.returncode = returncode
        self.stderr = stderr


class IncompleteOutputError(VStainError):
    pass


class ContractViolationError(VStainError):
    pass


class DegenerateImageError(VStainError):
    pass


class ImageTooSmallError(VStainError):
    pass


class UndefinedStatisticError(VStainError):
    pass


class ConfigError(VStainError):
    pass


class MissingArtifactsError(VStainError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing run artifacts: " + ", ".join(str(m) for m in self.missing))
