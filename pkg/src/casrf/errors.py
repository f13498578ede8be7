"""Exception types shared across the package.

Every failure mode that callers are expected to catch gets its own class
here so tests can assert on the type rather than on message text.
"""


class CasrfError(Exception):
    """Base class for all package errors."""


class ShapeError(CasrfError):
    """Operands have incompatible or unexpected shapes."""


class BroadcastError(ShapeError):
    """Shapes cannot be aligned under trailing-dimension broadcasting."""


class GraphError(CasrfError):
    """Invalid use of the autodiff graph (e.g. backward through a freed graph)."""


class NumericsError(CasrfError):
    """A computation produced or would produce non-finite values."""


class GeometryError(CasrfError):
    """Invalid camera or scene geometry (singular intrinsics, bad depth range, ...)."""


class StateError(CasrfError):
    """Object used in an order its lifecycle does not allow."""


class ContractError(CasrfError):
    """An input violates a documented precondition."""


class ConfigError(CasrfError):
    """Invalid or inconsistent configuration values."""


class CheckpointError(CasrfError):
    """Malformed checkpoint file or mismatched parameter inventory."""


class DataError(CasrfError):
    """Malformed image, camera, or dataset file."""


class EmptyMaskError(CasrfError):
    """An operation required a non-empty pixel mask but got none."""


class EmptyOverlapError(CasrfError):
    """No source view observes any part of the target frustum."""


class EmptyCloudError(CasrfError):
    """A point-cloud operation received an empty cloud."""
