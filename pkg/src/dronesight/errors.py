"""Exception hierarchy.

Invalid arguments (bad shapes, non-finite values, out-of-range parameters)
raise plain ValueError.  The classes below mark conditions that arise from
the data or the geometry rather than from caller mistakes, so pipelines can
catch and skip them individually.
"""


class DroneSightError(Exception):
    """Base class for domain errors raised by this package."""


class GeometryError(DroneSightError):
    """Base class for errors caused by degenerate or invalid geometry."""


class BehindCameraError(GeometryError):
    """A point required in front of the camera has non-positive depth."""


class DegenerateGeometryError(GeometryError):
    """Geometry admits no unique answer (zero baseline, parallel rays...)."""


class HorizonError(GeometryError):
    """A pixel ray points at or above the horizon of the ground plane."""


class DegenerateSamplesError(GeometryError):
    """Point samples do not constrain a plane (collinear or too few)."""


class InsufficientConstraintsError(DroneSightError):
    """Too few usable measurements to solve for the requested parameters."""


class NonConvergenceError(DroneSightError):
    """Iterative optimisation diverged.  Carries the best iterate seen."""

    def __init__(self, message, best_pose=None, best_cost=None):
        super().__init__(message)
        self.best_pose = best_pose
        self.best_cost = best_cost


class UndefinedCorrelationError(DroneSightError):
    """Correlation of an all-zero block is undefined."""


class LowCorrelationError(DroneSightError):
    """No correspondence scored above the acceptance threshold."""


class OutOfViewError(DroneSightError):
    """The searched region falls entirely outside the image."""


class NoSupportError(DroneSightError):
    """No detection contributed any usable ground sample."""


class InsufficientSeedsError(DroneSightError):
    """Densification needs at least three non-collinear seed points."""


class InvalidPairError(DroneSightError):
    """Tracklet pair violates the temporal ordering required for scoring."""


class UndefinedMetricsError(DroneSightError):
    """Tracking metrics are undefined for an empty ground truth."""


class EmptyReportError(DroneSightError):
    """A report was requested over an empty set of localizations."""


class ConfigError(DroneSightError):
    """Invalid or missing run configuration."""


class DataError(DroneSightError):
    """Malformed input file contents."""
