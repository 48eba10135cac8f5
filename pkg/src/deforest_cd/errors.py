"""Exception types shared across the package."""


class DeforestError(Exception):
    """Base class for every error raised by deforest_cd."""


class ConfigurationError(DeforestError, ValueError):
    """Invalid parameters (singular transform, window larger than image, ...)."""


class EmptyOverlapError(DeforestError, ValueError):
    """Rasters or grids that do not share any area."""


class GridMismatchError(DeforestError, ValueError):
    """Rasters that live on incompatible pixel grids."""


class ShapeError(DeforestError, ValueError):
    """Array shapes or channel counts that do not agree."""


class FormatError(DeforestError, OSError):
    """Corrupt, truncated or otherwise unreadable files."""


class IngestionError(DeforestError, ValueError):
    """Input data that cannot be interpreted (e.g. bad polygon class labels)."""


class DomainError(DeforestError, ValueError):
    """Values outside the range an operation is defined on."""
