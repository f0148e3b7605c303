"""Exception types shared across the package."""


class CrowdMtlError(Exception):
    """Base class for package errors."""


class DataError(CrowdMtlError):
    """Malformed or inconsistent input data (bad CSV, schema violations)."""


class NumericalError(CrowdMtlError):
    """Non-finite values or a diverging line search inside a solver."""
