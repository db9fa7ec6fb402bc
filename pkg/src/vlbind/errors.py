"""Exception hierarchy shared by all modules."""
from __future__ import annotations


class VLBindError(Exception):
    """Base class for toolkit errors."""


class ConfigError(VLBindError, ValueError):
    """A configuration cannot produce a valid artifact."""


class InvariantError(VLBindError):
    """A module invariant was violated.

    The message is prefixed with the module name so CLI reports can point
    at the failing stage.
    """

    def __init__(self, module: str, message: str):
        self.module = module
        super().__init__(f"[{module}] {message}")


class LayoutError(VLBindError, ValueError):
    """Token layout could not be resolved for an instance."""


class EditError(VLBindError, ValueError):
    """An activation edit is malformed (unknown site, width mismatch...)."""


class DegenerateError(VLBindError, ValueError):
    """A similarity target or statistic is undefined for the given data."""


class DimensionError(VLBindError, ValueError):
    """Requested dimensionality is incompatible with the data."""
