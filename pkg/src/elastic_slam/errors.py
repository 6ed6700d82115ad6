"""Exception types shared across the library."""


class ElasticSlamError(Exception):
    """Base class for all library errors."""


class DegenerateInput(ElasticSlamError):
    """Not enough (or rank-deficient) data to solve a fitting problem."""


class EmptyScan(ElasticSlamError):
    """A scan filter removed every point."""


class MalformedFile(ElasticSlamError):
    """An on-disk scan or trajectory file violates its format."""


class EmptyNeighborhood(ElasticSlamError):
    """No map points exist in the voxels around a query point."""


class DegenerateNeighborhood(ElasticSlamError):
    """Too few neighbors to estimate a stable normal."""


class TooFewResiduals(ElasticSlamError):
    """Scan-to-map association produced too few usable residuals."""


class SolverFailure(ElasticSlamError):
    """The normal equations stayed singular even after damping."""


class RegistrationFailed(ElasticSlamError):
    """Both the nominal and the conservative retry registration failed."""


class NoSegments(ElasticSlamError):
    """Trajectory too short for any drift-evaluation segment."""


class DegenerateGrid(ElasticSlamError):
    """An elevation grid has too few valid cells to be usable."""
