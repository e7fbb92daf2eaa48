"""Exception types shared across the package.

Everything derives from DearError so callers can catch broadly; the CLI maps
subclasses onto distinct exit codes.
"""


class DearError(Exception):
    pass


class ShapeError(DearError, ValueError):
    """Tensor dimensions do not match a declared contract."""


class SchemaError(DearError, ValueError):
    """Raw item features or histories violate the feature schema."""


class ContractError(DearError, ValueError):
    """An operation was called with inputs outside its contract."""


class PreconditionError(DearError, ValueError):
    """A stated precondition does not hold (e.g. empty candidate set)."""


class ConsistencyError(DearError, ValueError):
    """Paired structures disagree (e.g. gradients missing for a parameter)."""


class ConfigError(DearError, ValueError):
    """Configuration file or key is invalid."""


class CheckpointError(DearError, ValueError):
    """Checkpoint file is missing, truncated, or incompatible."""


class DataError(DearError, ValueError):
    """A session log or other data file is malformed beyond tolerance."""
