"""Exception types shared across the package."""


class FLCertError(Exception):
    """Base class for all package errors."""


class DomainError(FLCertError, ValueError):
    """An argument lies outside the domain an operation is defined on."""


class PreconditionError(FLCertError, ValueError):
    """Inputs are well-formed but violate an operation's precondition."""


class CapacityError(FLCertError):
    """An enumeration would exceed its configured size limit."""


class ConfigError(FLCertError, ValueError):
    """An experiment or attack configuration is inconsistent."""


class DatasetError(FLCertError, ValueError):
    """A dataset file could not be parsed."""
