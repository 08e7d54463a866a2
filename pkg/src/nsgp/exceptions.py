"""Exception types shared across the library."""


class NsgpError(Exception):
    """Base class for library errors."""


class NotPositiveDefinite(NsgpError):
    """Matrix could not be factorized even after jitter escalation."""


class DimensionMismatch(NsgpError):
    """Operands have non-conforming shapes."""


class NonPositiveLengthscale(NsgpError):
    """A lengthscale value is zero or negative."""


class MissingLatentContext(NsgpError):
    """A non-stationary kernel node was evaluated without field values."""


class GridTooCoarse(NsgpError):
    """Quadrature result did not stabilize under grid refinement."""


class NonFiniteGradient(NsgpError):
    """Gradient evaluation produced NaN or infinity."""


class DivergedObjective(NsgpError):
    """Objective became non-finite during optimization."""


class NonPositiveTarget(NsgpError):
    """Log-transformed regression requires strictly positive targets."""


class ParseError(NsgpError):
    """CSV ingestion failure; carries the offending line number when known."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class EmptyDataset(NsgpError):
    """No usable rows after ingestion or filtering."""


class DegenerateSplit(NsgpError):
    """A split strategy left the train or test side empty."""


class KTooLarge(NsgpError):
    """More clusters requested than distinct points available."""


class ConfigError(NsgpError):
    """Invalid run configuration; message names the offending path."""


class FingerprintMismatch(UserWarning):
    """Data statistics disagree with the normalization stored in a fit."""
