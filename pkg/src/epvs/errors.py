"""Exception hierarchy shared by every module.

All errors derive from :class:`EpvsError`.  The ones that signal bad input
(rather than a failure while computing) also derive from ``ValueError`` so
callers can catch them the usual way; the CLI maps those to exit code 1.
"""


class EpvsError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(EpvsError, ValueError):
    """Input or configuration failed validation."""


class NiftiFormatError(ValidationError):
    """File is not a readable NIfTI-1 image (bad magic, bad header)."""


class UnsupportedDtypeError(ValidationError):
    pass


class TruncatedFileError(ValidationError):
    pass


class GeometryError(ValidationError):
    """Affine is singular or otherwise unusable."""


class ShapeError(ValidationError):
    """Arrays or volumes do not share the required geometry/shape."""


class DomainError(ValidationError):
    """A value lies outside the domain accepted by an operation."""


class DegenerateInputError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class SpecError(ValidationError):
    """An augmentation spec cannot be applied to the given sample."""


class PlacementError(EpvsError):
    """Phantom lesions could not be placed without overlap."""


class UndefinedMetricError(EpvsError):
    """A metric is mathematically undefined for the given inputs.

    Aggregation code catches this and excludes the subject from that
    metric instead of substituting zero.
    """
