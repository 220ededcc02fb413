"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the range where a bound or formula is valid."""


class EmptyDatasetError(ValueError):
    """Least squares was requested on a dataset with no samples."""


class InapplicableError(ValueError):
    """The requested bound does not apply to the given system."""
