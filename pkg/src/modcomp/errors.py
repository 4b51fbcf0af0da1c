"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError and its relatives are
user/validation errors (exit 1), NumericError covers violated numeric
invariants (exit 2).
"""


class ModcompError(Exception):
    """Base class for all package errors."""


class ShapeError(ModcompError):
    """Operand shapes are inconsistent with the operation."""


class EmptyInputError(ModcompError):
    """An operation received an empty sequence, batch, or set."""


class ConfigError(ModcompError):
    """A configuration value or file is invalid."""


class PairingError(ModcompError):
    """Batch pairing or alignment requirements are not met."""


class StateError(ModcompError):
    """An object is in the wrong state for the requested operation."""


class StalenessError(ModcompError):
    """A backward pass received a cache that no longer matches its parameters."""


class DegenerateBatchError(ModcompError):
    """A batch cannot support the requested computation (e.g. no shared class)."""


class NumericError(ModcompError):
    """A numeric invariant was violated (non-finite values, tolerance breach)."""
