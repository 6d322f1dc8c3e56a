"""Exception types shared across the package."""


class DpzvError(Exception):
    """Base class for package-specific failures."""


class ProtocolStateError(DpzvError):
    """An operation was invoked while the protocol state forbids it."""


class ConfigError(DpzvError):
    """Invalid or contradictory run configuration."""


class FormatError(DpzvError):
    """A file does not conform to its declared on-disk format."""


class BracketError(DpzvError):
    """A root solve failed because the target lies outside the bracket."""

    def __init__(self, message, lo, hi, f_lo, f_hi):
        super().__init__(message)
        self.lo = lo
        self.hi = hi
        self.f_lo = f_lo
        self.f_hi = f_hi
