"""Exception types shared across the package."""


class FishgradeError(Exception):
    """Base class for all package errors."""


class ConfigError(FishgradeError):
    """Invalid configuration; names the offending field."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class PlacementError(FishgradeError):
    """Simulator could not place signals inside a polygon."""


class DegeneratePolygonError(FishgradeError):
    """Star polygon with fewer than 3 strictly positive radii."""


class OutOfBoundsError(FishgradeError):
    """Polygon lies fully outside the image."""


class FormatError(FishgradeError):
    """Malformed tensor file or head-map shapes; names the offending tensor."""


class InputError(FishgradeError):
    """Unreadable or invalid input data."""
