"""Exception types shared across the package."""


class DbpError(Exception):
    """Base class for all package-specific errors."""


class ContractError(DbpError):
    """A caller violated an operation's precondition."""


class ShapeError(ContractError):
    """Tensor shapes do not conform to the operation's rule."""


class ConfigError(DbpError):
    """Invalid experiment configuration (unknown key, bad type or range)."""


class ParseError(DbpError):
    """Malformed dataset file; message carries the offending line number."""


class GenerationError(DbpError):
    """Synthetic dataset generation could not satisfy its constraints."""


class SplitError(DbpError):
    """A requested split would leave some part without both labels."""


class FormatError(DbpError):
    """Corrupt or incompatible checkpoint file."""


class CompatError(DbpError):
    """Checkpoint and requested configuration disagree on shared fields."""


class NumericalAbort(DbpError):
    """Training produced a non-finite loss and was stopped."""
