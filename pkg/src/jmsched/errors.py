"""Exception types shared across the package."""


class JmschedError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(JmschedError):
    """An argument lies outside the mathematical domain of an operation."""


class SpecError(JmschedError):
    """A model specification is internally inconsistent (dimensions, variants)."""


class NumericError(JmschedError):
    """A numerical evaluation produced a non-finite or out-of-guard value."""


class ConfigError(JmschedError):
    """A run configuration is missing keys or holds invalid values."""


class DataError(JmschedError):
    """Input data violates the dataset contract (bad rows, bad indicators)."""
